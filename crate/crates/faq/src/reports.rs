//! Text outputs: calibration reports (JSON lines), metric and noise CSVs,
//! similarity summaries.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use faq_core::calibrate::{CalibrationReport, InputCalibration, LayerCalibration};
use faq_core::diagnostics::NoiseProbe;
use faq_core::train::EpochMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "lr",
    "batch_size",
    "train_loss",
    "train_acc",
    "val_acc",
    "mean_grad_noise_cosine",
];
pub const NOISE_HEADER: [&str; 3] = ["iteration", "layer_index", "cosine"];

/// One JSON line of a calibration report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum CalibrationLine {
    Input(InputCalibration),
    Layer(LayerCalibration),
    Warning { message: String },
}

/// The input record first, one line per ReLU, then warnings.
pub fn calibration_to_jsonl(report: &CalibrationReport) -> String {
    let mut lines = vec![CalibrationLine::Input(report.input)];
    lines.extend(report.layers.iter().cloned().map(CalibrationLine::Layer));
    lines.extend(report.warnings.iter().map(|m| CalibrationLine::Warning { message: m.clone() }));
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(&l).expect("calibration records serialize"));
        out.push('\n');
    }
    out
}

pub fn calibration_from_jsonl(text: &str) -> Result<CalibrationReport> {
    let mut input = None;
    let mut layers = Vec::new();
    let mut warnings = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: CalibrationLine =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("calibration report line {}: {e}", n + 1)))?;
        match rec {
            CalibrationLine::Input(i) => input = Some(i),
            CalibrationLine::Layer(l) => layers.push(l),
            CalibrationLine::Warning { message } => warnings.push(message),
        }
    }
    Ok(CalibrationReport {
        input: input.ok_or_else(|| Error::Format("calibration report has no input record".into()))?,
        layers,
        warnings,
    })
}

pub fn write_calibration(report: &CalibrationReport, path: &Path) -> Result<()> {
    fs::write(path, calibration_to_jsonl(report)).map_err(|e| Error::io(path, e))
}

pub fn read_calibration(path: &Path) -> Result<CalibrationReport> {
    calibration_from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Append-only epoch metrics. The header is written when the file is new.
pub struct MetricsLog {
    writer: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(METRICS_HEADER).map_err(|e| csv_err(path, e))?;
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            writer,
            path: path.into(),
        })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.writer
            .write_record([
                m.epoch.to_string(),
                m.lr.to_string(),
                m.batch_size.to_string(),
                m.train_loss.to_string(),
                m.train_acc.to_string(),
                opt(m.val_acc),
                opt(m.mean_grad_noise_cosine),
            ])
            .map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rd.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(Error::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    let bad = |what: &str| Error::Format(format!("{}: bad {what}", path.display()));
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad("optional column"))
        }
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let r = rec.map_err(|e| csv_err(path, e))?;
        out.push(EpochMetrics {
            epoch: r[0].parse().map_err(|_| bad("epoch"))?,
            lr: r[1].parse().map_err(|_| bad("lr"))?,
            batch_size: r[2].parse().map_err(|_| bad("batch_size"))?,
            train_loss: r[3].parse().map_err(|_| bad("train_loss"))?,
            train_acc: r[4].parse().map_err(|_| bad("train_acc"))?,
            val_acc: opt(&r[5])?,
            mean_grad_noise_cosine: opt(&r[6])?,
        });
    }
    Ok(out)
}

/// Every `k`-th probe sample as `iteration,layer_index,cosine`.
pub fn write_noise_csv(probe: &NoiseProbe, k: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(NOISE_HEADER).map_err(|e| csv_err(path, e))?;
    for (it, layer, c) in probe.logged(k) {
        w.write_record([it.to_string(), layer.to_string(), c.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_noise_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let v: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("{}: line {}", path.display(), n + 1));
        if v.len() != 3 {
            return Err(bad());
        }
        out.push((
            v[0].parse().map_err(|_| bad())?,
            v[1].parse().map_err(|_| bad())?,
            v[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

/// Writes `rows` under `header` as CSV.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{s}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use faq_core::calibrate::calibrate;
    use faq_core::models::random_small;
    use faq_core::{Tensor, PrecisionPolicy};

    fn report(seed: u64) -> CalibrationReport {
        let net = random_small::<f64>(seed).unwrap();
        let shape: Vec<usize> = std::iter::once(4).chain(net.input_shape().iter().copied()).collect();
        let n: usize = shape.iter().product();
        let x = Tensor::from_f64(shape, &(0..n).map(|i| ((i * 7919) % 201) as f64 / 50.0 - 2.0).collect::<Vec<_>>()).unwrap();
        calibrate(&net, &[x.clone(), x.map(|v| v * 0.5)], &PrecisionPolicy::fixed(4)).unwrap()
    }

    #[test]
    fn calibration_jsonl_round_trip() {
        for seed in 0..5 {
            let mut r = report(seed);
            r.warnings.push("something odd".into());
            let text = calibration_to_jsonl(&r);
            assert_eq!(text.lines().count(), 1 + r.layers.len() + r.warnings.len());
            assert_eq!(calibration_from_jsonl(&text).unwrap(), r);
        }
        assert!(calibration_from_jsonl("").is_err());
    }

    #[test]
    fn metrics_append_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = |e| EpochMetrics {
            epoch: e,
            lr: 0.1 / e as f64,
            batch_size: 64,
            train_loss: 0.3,
            train_acc: 0.9,
            val_acc: if e > 1 { Some(0.95) } else { None },
            mean_grad_noise_cosine: Some(0.123456789),
        };
        MetricsLog::open(&p).unwrap().append(&m(1)).unwrap();
        MetricsLog::open(&p).unwrap().append(&m(2)).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), vec![m(1), m(2)]);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,lr,batch_size,train_loss,train_acc,val_acc,mean_grad_noise_cosine\n"));
    }
}
