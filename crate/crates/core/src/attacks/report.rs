use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

pub const ATTACK_CSV_SCHEMA: &str = "nodekd.attack.v1";

pub const ATTACK_CSV_COLUMNS: [&str; 10] = [
    "epsilon",
    "clean_acc",
    "attacked_acc",
    "mean_norm",
    "mean_nfe",
    "steps",
    "max_norm",
    "mean_loss_clean",
    "mean_loss_adv",
    "failed",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AttackEntry {
    pub epsilon: f64,
    pub steps: usize,
    pub clean_acc: f64,
    pub attacked_acc: f64,
    /// L-infinity norm of the achieved perturbation.
    pub mean_norm: f64,
    pub max_norm: f64,
    pub mean_loss_clean: f64,
    pub mean_loss_adv: f64,
    pub mean_nfe: f64,
    /// Samples dropped because a forward or attack pass failed numerically.
    pub failed: usize,
    /// Per sample: the attacked prediction is wrong.
    pub success: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AttackReport {
    pub attack: String,
    pub entries: Vec<AttackEntry>,
}

impl AttackReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# schema={ATTACK_CSV_SCHEMA} attack={}\n{}\n", self.attack, ATTACK_CSV_COLUMNS.join(","));
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                e.epsilon,
                e.clean_acc,
                e.attacked_acc,
                e.mean_norm,
                e.mean_nfe,
                e.steps,
                e.max_norm,
                e.mean_loss_clean,
                e.mean_loss_adv,
                e.failed
            );
        }
        s
    }

    pub fn to_json(&self, meta: &BTreeMap<String, String>) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'a str,
            meta: &'a BTreeMap<String, String>,
            #[serde(flatten)]
            report: &'a AttackReport,
        }
        let doc = Doc {
            schema: ATTACK_CSV_SCHEMA,
            meta,
            report: self,
        };
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }

    /// Entry with the largest epsilon.
    pub fn last(&self) -> Option<&AttackEntry> {
        self.entries.last()
    }
}
