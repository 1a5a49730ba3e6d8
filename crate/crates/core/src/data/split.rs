use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub class: usize,
    /// Path or other locator; opaque to the split logic.
    pub path: String,
    /// Prescribed partition, when the dataset ships one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<Part>,
}

/// Classes and their images. Image references are indices into `entries`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub name: String,
    pub classes: Vec<String>,
    pub entries: Vec<ImageEntry>,
}

impl DatasetIndex {
    pub fn new(name: impl Into<String>, classes: Vec<String>, entries: Vec<ImageEntry>) -> Result<Self> {
        let index = DatasetIndex {
            name: name.into(),
            classes,
            entries,
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.classes.iter().map(String::as_str).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Parameter(format!("duplicate class name '{}'", w[0])));
        }
        let counts = self.class_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Parameter(format!("class '{}' has no images", self.classes[c])));
        }
        if let Some(e) = self.entries.iter().find(|e| e.class >= self.classes.len()) {
            return Err(Error::Parameter(format!("image '{}' has unknown class {}", e.path, e.class)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in &self.entries {
            if let Some(c) = counts.get_mut(e.class) {
                *c += 1;
            }
        }
        counts
    }

    /// Entry indices grouped by class, in entry order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes.len()];
        for (i, e) in self.entries.iter().enumerate() {
            groups[e.class].push(i);
        }
        groups
    }

    pub fn has_fixed_assignment(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.part.is_some())
    }
}

/// How `A×ALL` distributes images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountAllReading {
    /// `A` images per class go to testing, the remainder trains.
    #[default]
    TestCount,
    /// `A` images per class train, the remainder tests.
    TrainCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SplitSpec {
    CountCount { test: usize, train: usize },
    CountAll { count: usize },
    FracFrac { test: f64, train: f64 },
    Fixed,
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSpec::CountCount { test, train } => write!(f, "{test}x{train}"),
            SplitSpec::CountAll { count } => write!(f, "{count}xALL"),
            SplitSpec::FracFrac { test, train } => write!(f, "{}x{}", fraction_text(*test), fraction_text(*train)),
            SplitSpec::Fixed => write!(f, "FIXED"),
        }
    }
}

fn fraction_text(v: f64) -> String {
    for den in 2..=100u32 {
        let num = v * den as f64;
        if (num - num.round()).abs() < 1e-9 {
            return format!("{}/{den}", num.round() as u32);
        }
    }
    format!("{v}")
}

enum Term {
    Count(usize),
    Fraction(f64),
    All,
}

fn parse_term(text: &str, offset: usize) -> Result<Term> {
    let err = |position: usize, message: String| Error::Parse { position, message };
    if text.is_empty() {
        return Err(err(offset, "expected a count, fraction or ALL".into()));
    }
    if text.eq_ignore_ascii_case("all") {
        return Ok(Term::All);
    }
    let number = |s: &str, at: usize| -> Result<usize> {
        if s.is_empty() {
            return Err(err(at, "expected digits".into()));
        }
        if let Some(i) = s.find(|c: char| !c.is_ascii_digit()) {
            return Err(err(at + i, format!("unexpected character '{}'", &s[i..].chars().next().unwrap())));
        }
        s.parse().map_err(|_| err(at, format!("number '{s}' is out of range")))
    };
    match text.split_once('/') {
        Some((num, den)) => {
            let n = number(num, offset)?;
            let d = number(den, offset + num.len() + 1)?;
            if d == 0 || n == 0 || n >= d {
                return Err(err(offset, format!("fraction {n}/{d} must lie strictly between 0 and 1")));
            }
            Ok(Term::Fraction(n as f64 / d as f64))
        }
        None => {
            let n = number(text, offset)?;
            if n == 0 {
                return Err(err(offset, "counts must be positive".into()));
            }
            Ok(Term::Count(n))
        }
    }
}

/// Parses `AxB`, `AxALL`, `a/bxc/d` or `FIXED` (case-insensitive, `x` or `×`).
pub fn parse_split_spec(text: &str) -> Result<SplitSpec> {
    let lead = text.len() - text.trim_start().len();
    let body = text.trim();
    if body.eq_ignore_ascii_case("fixed") {
        return Ok(SplitSpec::Fixed);
    }
    let sep = body
        .char_indices()
        .find(|&(_, c)| c == 'x' || c == 'X' || c == '×')
        .ok_or(Error::Parse {
            position: lead + body.len(),
            message: "expected 'x' between the test and train terms".into(),
        })?;
    let (left, right) = (&body[..sep.0], &body[sep.0 + sep.1.len_utf8()..]);
    let right_at = lead + sep.0 + sep.1.len_utf8();
    let test = parse_term(left, lead)?;
    let train = parse_term(right, right_at)?;
    match (test, train) {
        (Term::Count(test), Term::Count(train)) => Ok(SplitSpec::CountCount { test, train }),
        (Term::Count(count), Term::All) => Ok(SplitSpec::CountAll { count }),
        (Term::Fraction(test), Term::Fraction(train)) => {
            if test + train > 1.0 + 1e-12 {
                return Err(Error::Parse {
                    position: lead,
                    message: "fractions must not sum to more than 1".into(),
                });
            }
            Ok(SplitSpec::FracFrac { test, train })
        }
        (Term::All, _) => Err(Error::Parse {
            position: lead,
            message: "ALL is only allowed as the training term".into(),
        }),
        _ => Err(Error::Parse {
            position: right_at,
            message: "both terms must be counts or both fractions".into(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sample {
    pub class: usize,
    pub image: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

impl Split {
    /// Training samples grouped by class (empty vectors for absent classes).
    pub fn train_by_class(&self, num_classes: usize) -> Vec<Vec<Sample>> {
        let mut groups = vec![Vec::new(); num_classes];
        for s in &self.train {
            if let Some(g) = groups.get_mut(s.class) {
                g.push(*s);
            }
        }
        groups
    }
}

/// Per class: draw test images first, then training images from the remainder.
pub fn make_split(index: &DatasetIndex, spec: &SplitSpec, seed: u64, reading: CountAllReading) -> Result<Split> {
    if let SplitSpec::Fixed = spec {
        if !index.has_fixed_assignment() {
            return Err(Error::Parameter(format!(
                "dataset '{}' carries no fixed train/test assignment",
                index.name
            )));
        }
        let mut split = Split {
            train: Vec::new(),
            test: Vec::new(),
            seed,
        };
        for (i, e) in index.entries.iter().enumerate() {
            let s = Sample { class: e.class, image: i };
            match e.part {
                Some(Part::Train) => split.train.push(s),
                Some(Part::Test) => split.test.push(s),
                None => unreachable!("checked by has_fixed_assignment"),
            }
        }
        return Ok(split);
    }

    let mut rng = rng::stream(seed, rng::SPLIT);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (class, mut images) in index.by_class().into_iter().enumerate() {
        let n = images.len();
        let (test_n, train_n) = match *spec {
            SplitSpec::CountCount { test, train } => (test, train),
            SplitSpec::CountAll { count } => match reading {
                CountAllReading::TestCount => (count, n.saturating_sub(count).max(1)),
                CountAllReading::TrainCount => (n.saturating_sub(count).max(1), count),
            },
            SplitSpec::FracFrac { test, train } => {
                ((test * n as f64).floor() as usize, (train * n as f64).floor() as usize)
            }
            SplitSpec::Fixed => unreachable!(),
        };
        if test_n == 0 || train_n == 0 || test_n + train_n > n {
            return Err(Error::Capacity {
                class: index.classes[class].clone(),
                available: n,
                required: (test_n + train_n).max(2),
            });
        }
        images.shuffle(&mut rng);
        split.test.extend(images[..test_n].iter().map(|&image| Sample { class, image }));
        split
            .train
            .extend(images[test_n..test_n + train_n].iter().map(|&image| Sample { class, image }));
    }
    Ok(split)
}
