//! JSON-lines reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use spsedit_core::metrics::MetricRecord;
use spsedit_core::pipeline::StepRecord;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLine<'a> {
    pub stage: &'a str,
    pub step: usize,
    pub phase: u8,
    pub loss: f64,
    pub lambda: f64,
    pub grad_norm: f64,
}

impl<'a> From<&'a StepRecord> for StepLine<'a> {
    fn from(r: &'a StepRecord) -> Self {
        Self { stage: r.stage.label(), step: r.step, phase: r.phase, loss: r.loss, lambda: r.lambda, grad_norm: r.grad_norm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricLine<'a> {
    pub metric: &'a str,
    pub value: f64,
    pub views: usize,
    pub seed: u64,
}

impl<'a> From<&'a MetricRecord> for MetricLine<'a> {
    fn from(r: &'a MetricRecord) -> Self {
        Self { metric: &r.metric, value: r.value, views: r.views, seed: r.seed }
    }
}

/// A metric tagged with the sweep run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepLine<'a> {
    pub run: &'a str,
    pub fusion_rate: f64,
    #[serde(flatten)]
    pub metric: MetricLine<'a>,
}

pub fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_line_is_flat() {
        let line = SweepLine {
            run: "r0.35",
            fusion_rate: 0.35,
            metric: MetricLine { metric: "voxel_iou_target", value: 0.5, views: 100, seed: 2 },
        };
        assert_eq!(
            serde_json::to_string(&line).unwrap(),
            r#"{"run":"r0.35","fusion_rate":0.35,"metric":"voxel_iou_target","value":0.5,"views":100,"seed":2}"#
        );
    }
}
