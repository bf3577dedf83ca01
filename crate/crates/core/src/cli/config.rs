use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Environment variable naming the directory under which runs are written
/// when `out` is not set.
pub const OUT_ROOT_ENV: &str = "NODEKD_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    TrainTeacher,
    TrainPlain,
    Distill,
    Attack,
    Reproduce,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::TrainTeacher,
        Command::TrainPlain,
        Command::Distill,
        Command::Attack,
        Command::Reproduce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::TrainPlain => "train-plain",
            Command::Distill => "distill",
            Command::Attack => "attack",
            Command::Reproduce => "reproduce",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s:?}")))
    }
}

const T: u8 = 1; // train-teacher
const P: u8 = 2; // train-plain
const D: u8 = 4; // distill
const A: u8 = 8; // attack
const R: u8 = 16; // reproduce
const DATA: u8 = T | P | D | A;
const STUDENT: u8 = P | D;
const TRAIN: u8 = T | P | D;

/// `(key, commands using it, default)`. Defaults that depend on the command
/// are filled in by [`command_default`].
const KEYS: &[(&str, u8, &str)] = &[
    ("seed", T | P | D | A | R, "0"),
    ("out", T | P | D | A | R, ""),
    ("data.kind", DATA, "synthetic"),
    ("data.synthetic", DATA, "spirals"),
    ("data.n_train", DATA, "2000"),
    ("data.n_test", DATA, "1000"),
    ("data.noise", DATA, "0.1"),
    ("data.seed", DATA, "1"),
    ("data.train_images", DATA, ""),
    ("data.train_labels", DATA, ""),
    ("data.test_images", DATA, ""),
    ("data.test_labels", DATA, ""),
    ("data.train_csv", DATA, ""),
    ("data.test_csv", DATA, ""),
    ("data.shape", DATA, ""),
    ("data.limit_train", DATA, "0"),
    ("data.limit_test", DATA, "0"),
    ("augment.crop", TRAIN, "false"),
    ("augment.pad", TRAIN, "4"),
    ("augment.flip", TRAIN, "false"),
    ("augment.flip_prob", TRAIN, "0.5"),
    ("teacher.preset", T, "small-8"),
    ("teacher.width", T, "32"),
    ("teacher.kind", T, "dense"),
    ("teacher.activation", T, "relu"),
    ("student.width", STUDENT, "64"),
    ("student.kind", STUDENT, "dense"),
    ("student.activation", STUDENT, "tanh"),
    ("student.t1", STUDENT, "1"),
    ("student.solver", STUDENT, "dopri5:1e-3:1e-3"),
    ("train.epochs", TRAIN, "30"),
    ("train.batch_size", TRAIN, "128"),
    ("train.optimizer", TRAIN, ""),
    ("train.lr", TRAIN, ""),
    ("train.max_failures", TRAIN, "10"),
    ("distill.teacher", D, ""),
    ("distill.temperature", D, "10"),
    ("distill.lambda", D, "0.9"),
    ("distill.targets_on_augmented", D, "false"),
    ("attack.checkpoint", A, ""),
    ("attack.kinds", A, "pgd,mifgsm"),
    ("attack.eps_grid", A, "0,2,4,8,12,16,20"),
    ("attack.eps_scale", A, "1"),
    ("attack.step_size", A, "1"),
    ("attack.steps", A, "auto"),
    ("attack.momentum", A, "1"),
    ("attack.random_start", A, "true"),
    ("attack.limit", A, "0"),
    ("reproduce.claim", R, "kd-accuracy"),
    ("reproduce.seeds", R, "5"),
    ("reproduce.scale", R, "full"),
];

/// Defaults that differ between commands: teachers and distilled
/// short-horizon students use SGD with momentum, every other student Adam.
fn command_default(cmd: Command, key: &str, values: &BTreeMap<String, String>) -> Option<String> {
    match (cmd, key) {
        (Command::TrainTeacher, "train.optimizer") => Some("sgd".into()),
        (Command::TrainTeacher, "train.lr") => Some("0.05".into()),
        (Command::TrainPlain, "train.optimizer") => Some("adam".into()),
        (Command::Distill, "train.optimizer") => {
            let t1: f64 = values.get("student.t1").and_then(|v| v.parse().ok()).unwrap_or(1.0);
            Some(if t1 <= 1.0 { "sgd" } else { "adam" }.into())
        }
        (Command::TrainPlain | Command::Distill, "train.lr") => Some("0.001".into()),
        _ => None,
    }
}

/// Flat `key=value` configuration of one command, with every key known to
/// the command present after [`RunConfig::resolve`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    values: BTreeMap<String, String>,
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Builds the configuration from an optional file plus `--set`
    /// overrides (applied in order, later wins).
    pub fn load(command: Command, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            pairs.extend(parse_kv(&text)?);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(command, pairs)
    }

    pub fn from_pairs(command: Command, pairs: Vec<(String, String)>) -> Result<Self> {
        let mask = 1u8 << Command::ALL.iter().position(|c| *c == command).unwrap();
        let mut values = BTreeMap::new();
        for (k, v) in pairs {
            match KEYS.iter().find(|(name, _, _)| *name == k) {
                Some((_, cmds, _)) if cmds & mask != 0 => {
                    values.insert(k, v);
                }
                Some(_) => return Err(Error::Config(format!("key {k:?} does not apply to {command}"))),
                None => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        let mut cfg = Self { command, values };
        cfg.resolve(mask);
        Ok(cfg)
    }

    fn resolve(&mut self, mask: u8) {
        for (k, cmds, default) in KEYS {
            if cmds & mask == 0 || self.values.contains_key(*k) {
                continue;
            }
            let v = command_default(self.command, k, &self.values).unwrap_or_else(|| default.to_string());
            self.values.insert(k.to_string(), v);
        }
    }

    /// Every resolved key, sorted; parsing it back yields the same config.
    pub fn snapshot(&self) -> String {
        let mut s = format!("# resolved configuration for `{}`\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        assert!(self.values.contains_key(key), "{key} is not a key of {}", self.command);
        self.values.insert(key.into(), value.into());
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("{key} is not a key of {}", self.command))
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Comma-separated list.
    pub fn list<V: FromStr>(&self, key: &str) -> Result<Vec<V>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("invalid list item {s:?} in {key}")))
            })
            .collect()
    }

    /// `out` if set, else `$NODEKD_OUT/<command>`, else `runs/<command>`.
    pub fn out_dir(&self) -> PathBuf {
        match self.path("out") {
            Some(p) => p,
            None => {
                let root = std::env::var_os(OUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                root.join(self.command.name())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_and_foreign_keys_are_errors() {
        let e = RunConfig::from_pairs(Command::TrainTeacher, vec![("bogus".into(), "1".into())]);
        assert!(matches!(e, Err(Error::Config(_))));
        let e = RunConfig::from_pairs(Command::TrainTeacher, vec![("distill.lambda".into(), "0".into())]);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::load(
            Command::Distill,
            None,
            &["student.t1=5".into(), "seed=3".into()],
        )
        .unwrap();
        assert_eq!(cfg.raw("train.optimizer"), "adam");
        let back = RunConfig::from_pairs(Command::Distill, parse_kv(&cfg.snapshot()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win_and_comments_are_ignored() {
        let pairs = parse_kv("seed = 4 # master seed\n\n# full line\ntrain.epochs=3\n").unwrap();
        assert_eq!(pairs.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "seed=4\n").unwrap();
        let cfg = RunConfig::load(Command::TrainPlain, Some(&p), &["seed=9".into()]).unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 9);
        assert!(parse_kv("novalue\n").is_err());
    }
}
