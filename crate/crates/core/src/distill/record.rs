use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

/// Version of the per-epoch CSV layout; bumped whenever columns change.
pub const TRAIN_CSV_SCHEMA: &str = "nodekd.train.v1";

pub const TRAIN_CSV_COLUMNS: [&str; 9] = [
    "epoch",
    "lr",
    "loss_sl",
    "loss_kd",
    "loss_total",
    "train_acc",
    "test_acc",
    "mean_nfe",
    "skipped_batches",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_sl: f64,
    pub loss_kd: f64,
    pub loss_total: f64,
    /// Running accuracy over the (augmented) training batches.
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_nfe: f64,
    pub skipped_batches: usize,
    /// Kept out of the metrics files so reruns compare bit for bit.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_test_acc: Option<f64>,
    pub aborted: Option<String>,
}

impl TrainRecord {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# schema={TRAIN_CSV_SCHEMA}\n{}\n", TRAIN_CSV_COLUMNS.join(","));
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.loss_sl,
                e.loss_kd,
                e.loss_total,
                e.train_acc,
                e.test_acc,
                e.mean_nfe,
                e.skipped_batches
            );
        }
        s
    }

    /// Full record plus run metadata as pretty JSON.
    pub fn to_json(&self, meta: &BTreeMap<String, String>) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'a str,
            meta: &'a BTreeMap<String, String>,
            #[serde(flatten)]
            record: &'a TrainRecord,
        }
        let doc = Doc {
            schema: TRAIN_CSV_SCHEMA,
            meta,
            record: self,
        };
        serde_json::to_string_pretty(&doc).expect("record serializes") + "\n"
    }

    /// Wall-clock seconds per epoch, for the separate timing file.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,wall_time_s\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{}", e.epoch, e.wall_time_s);
        }
        s
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }
}
