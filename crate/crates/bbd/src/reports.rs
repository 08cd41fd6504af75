//! CSV outputs.

use std::path::Path;

use bbd_core::metrics::{ConfusionMatrix, CropCorrelation, SweepReport};
use bbd_core::scenegen::ClassProfile;

use crate::error::{Error, Result};

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}

/// `class,scale,iou`, one row per class and scale.
pub fn sweep_csv(report: &SweepReport, profiles: &[ClassProfile]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "scale", "iou"]).unwrap();
    for (c, row) in report.iou.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            w.write_record([profiles[c].name.clone(), report.scales[j].to_string(), opt(*v)]).unwrap();
        }
    }
    finish(w)
}

/// `crop_id,spearman,n_scales`.
pub fn correlation_csv(rows: &[CropCorrelation]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["crop_id", "spearman", "n_scales"]).unwrap();
    for (i, r) in rows.iter().enumerate() {
        w.write_record([i.to_string(), opt(r.spearman), r.n_scales.to_string()]).unwrap();
    }
    finish(w)
}

/// `class,iou` per class, then a final `mIoU` row.
pub fn eval_csv(cm: &ConfusionMatrix, profiles: &[ClassProfile]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "iou"]).unwrap();
    for (c, p) in profiles.iter().enumerate().take(cm.k()) {
        w.write_record([p.name.clone(), opt(cm.iou(c))]).unwrap();
    }
    w.write_record(["mIoU".to_string(), opt(cm.miou().ok())]).unwrap();
    finish(w)
}

/// `tau,miou,pass_rate`.
pub fn ablation_csv(rows: &[(f64, f64, f64)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tau", "miou", "pass_rate"]).unwrap();
    for &(tau, m, p) in rows {
        w.write_record([tau.to_string(), format!("{m:.6}"), format!("{p:.6}")]).unwrap();
    }
    finish(w)
}

pub fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(Error::io(&path))
}
