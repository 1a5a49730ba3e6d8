#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clap::Parser;
use leafnet_cli::{Cli, Command};

pub fn parse(args: &[&str]) -> Command {
    Cli::try_parse_from(std::iter::once("leafnet").chain(args.iter().copied()))
        .expect("arguments parse")
        .command
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A raw synthetic tree and its desk-scale cache under `dir`.
pub fn desk_cache(dir: &Path, family: &str, per_class: usize) -> PathBuf {
    let raw = dir.join(format!("raw-{family}"));
    let cache = dir.join(format!("cache-{family}"));
    let cmd = parse(&[
        "synthetic-dataset",
        s(&raw),
        "--family",
        family,
        "--per-class",
        &per_class.to_string(),
        "--cache",
        s(&cache),
    ]);
    leafnet_cli::commands::dispatch(Cli { command: cmd }).expect("synthetic dataset");
    cache
}

/// A short desk-scale configuration over `cache`; keys in `extra` replace
/// the defaults.
pub fn write_config(dir: &Path, name: &str, cache: &Path, extra: &str) -> PathBuf {
    let defaults = [
        "preset = \"desk\"".to_string(),
        format!("dataset = \"{}\"", cache.display()),
        "split = \"2x8\"".into(),
        "iterations = 20".into(),
        "lr_step = 20".into(),
        "monitor_every = 10".into(),
        "monitor_samples = 20".into(),
        "protocols = [\"t0\", \"tr:4\", \"tf:4\"]".into(),
    ];
    let key = |line: &str| line.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut lines: Vec<String> = defaults.into_iter().filter(|l| !overridden.contains(&key(l))).collect();
    lines.extend(extra.lines().map(str::to_string));
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}
