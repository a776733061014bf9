//! Per-layer quality metrics and the engine comparison table.
//!
//! CSV schema (`foem-compare v1`), one row per (layer, engine), sorted by
//! layer then engine label:
//!
//! ```text
//! # foem-compare v1
//! layer,engine,bits,group_size,beta,block_size,proxy_loss,rtn_relative,wall_time_s,drift_max,drift_mean
//! ```
//!
//! `group_size` is empty for whole-row groups. The JSON summary carries
//! per-engine means and win counts plus pairwise loss ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{gemm, DenseMatrix};

pub const CSV_SCHEMA: &str = "# foem-compare v1";
pub const SUMMARY_SCHEMA: &str = "foem-compare/1";

/// `trace(Δ H Δᵀ)` with `Δ = W_deq - W_orig`; equals `‖Δ X‖²_F` when `H = X Xᵀ`.
pub fn proxy_loss(deq: &DenseMatrix, original: &DenseMatrix, h: &DenseMatrix) -> Result<f64> {
    if deq.shape() != original.shape() {
        return Err(Error::dims(
            "proxy_loss weights",
            format!("{:?}", original.shape()),
            format!("{:?}", deq.shape()),
        ));
    }
    let d = deq.cols();
    if h.shape() != (d, d) {
        return Err(Error::dims("proxy_loss Hessian", format!("{d}x{d}"), format!("{:?}", h.shape())));
    }
    let delta = deq.sub_matrix(original);
    let rows = delta.rows();
    let mut dh = DenseMatrix::zeros(rows, d);
    gemm(1.0, delta.view(), h.view(), 0.0, dh.sub_mut(0..rows, 0..d));
    Ok(dh
        .as_slice()
        .iter()
        .zip(delta.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftStats {
    pub max_abs: f64,
    pub mean_abs: f64,
}

impl DriftStats {
    pub fn between(latent: &DenseMatrix, original: &DenseMatrix) -> Self {
        let n = latent.as_slice().len();
        if n == 0 {
            return DriftStats::default();
        }
        let (mut max_abs, mut sum) = (0.0f64, 0.0);
        for (a, b) in latent.as_slice().iter().zip(original.as_slice()) {
            let d = (a - b).abs();
            max_abs = max_abs.max(d);
            sum += d;
        }
        DriftStats {
            max_abs,
            mean_abs: sum / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub engine: String,
    pub bits: u8,
    pub group_size: Option<usize>,
    pub beta: f64,
    pub block_size: usize,
    pub proxy_loss: f64,
    pub rtn_relative: f64,
    pub wall_time_s: f64,
    pub drift: DriftStats,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EngineSummary {
    pub layers: usize,
    pub mean_proxy_loss: f64,
    pub mean_rtn_relative: f64,
    /// Layers where this engine alone has the lowest proxy loss.
    pub wins: usize,
    /// Layers where this engine shares the lowest proxy loss.
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub a: String,
    pub b: String,
    pub layers: usize,
    /// Mean over layers of `loss_a / loss_b` (0/0 counts as 1).
    pub mean_ratio: f64,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
    /// Fraction of layers where `a` is strictly better.
    pub a_win_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub schema: String,
    pub layers: usize,
    pub engines: BTreeMap<String, EngineSummary>,
    pub pairwise: Vec<PairSummary>,
    /// Problems found in the input, e.g. engines that did not cover every layer.
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub csv: String,
    pub summary: ComparisonSummary,
}

impl Comparison {
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

/// Builds the CSV table and JSON summary for a set of per-layer reports.
pub fn compare_table(reports: &[LayerReport]) -> Comparison {
    let mut rows: Vec<&LayerReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.layer.cmp(&b.layer).then_with(|| a.engine.cmp(&b.engine)));

    let mut csv = String::new();
    csv.push_str(CSV_SCHEMA);
    csv.push('\n');
    csv.push_str("layer,engine,bits,group_size,beta,block_size,proxy_loss,rtn_relative,wall_time_s,drift_max,drift_mean\n");
    for r in &rows {
        let gs = r.group_size.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.layer,
            r.engine,
            r.bits,
            gs,
            r.beta,
            r.block_size,
            r.proxy_loss,
            r.rtn_relative,
            r.wall_time_s,
            r.drift.max_abs,
            r.drift.mean_abs
        );
    }

    // loss[engine][layer]
    let mut loss: BTreeMap<&str, BTreeMap<&str, &LayerReport>> = BTreeMap::new();
    let mut layers: BTreeSet<&str> = BTreeSet::new();
    let mut flags = Vec::new();
    for r in &rows {
        layers.insert(&r.layer);
        if loss.entry(&r.engine).or_default().insert(&r.layer, r).is_some() {
            flags.push(format!("duplicate report for layer `{}` engine `{}`", r.layer, r.engine));
        }
    }
    for (engine, per_layer) in &loss {
        let missing: Vec<&str> = layers.iter().filter(|l| !per_layer.contains_key(*l)).copied().collect();
        if !missing.is_empty() {
            flags.push(format!("engine `{engine}` missing layers: {}", missing.join(", ")));
        }
    }

    let mut engines: BTreeMap<String, EngineSummary> = BTreeMap::new();
    for (engine, per_layer) in &loss {
        let n = per_layer.len();
        let s = EngineSummary {
            layers: n,
            mean_proxy_loss: per_layer.values().map(|r| r.proxy_loss).sum::<f64>() / n.max(1) as f64,
            mean_rtn_relative: per_layer.values().map(|r| r.rtn_relative).sum::<f64>() / n.max(1) as f64,
            wins: 0,
            ties: 0,
        };
        engines.insert(engine.to_string(), s);
    }
    for layer in &layers {
        let entries: Vec<(&str, f64)> = loss
            .iter()
            .filter_map(|(e, m)| m.get(layer).map(|r| (*e, r.proxy_loss)))
            .collect();
        let best = entries.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
        let winners: Vec<&str> = entries.iter().filter(|(_, l)| *l == best).map(|(e, _)| *e).collect();
        if entries.len() < 2 {
            continue;
        }
        for w in &winners {
            let s = engines.get_mut(*w).expect("engine present");
            if winners.len() == 1 {
                s.wins += 1;
            } else {
                s.ties += 1;
            }
        }
    }

    let names: Vec<&str> = loss.keys().copied().collect();
    let mut pairwise = Vec::new();
    for (ai, a) in names.iter().enumerate() {
        for b in &names[ai + 1..] {
            let (la, lb) = (&loss[a], &loss[b]);
            let common: Vec<&str> = la.keys().filter(|l| lb.contains_key(*l)).copied().collect();
            let mut p = PairSummary {
                a: a.to_string(),
                b: b.to_string(),
                layers: common.len(),
                mean_ratio: 0.0,
                a_wins: 0,
                b_wins: 0,
                ties: 0,
                a_win_fraction: 0.0,
            };
            for l in &common {
                let (x, y) = (la[l].proxy_loss, lb[l].proxy_loss);
                p.mean_ratio += ratio(x, y);
                match x.partial_cmp(&y) {
                    Some(std::cmp::Ordering::Less) => p.a_wins += 1,
                    Some(std::cmp::Ordering::Greater) => p.b_wins += 1,
                    _ => p.ties += 1,
                }
            }
            if !common.is_empty() {
                p.mean_ratio /= common.len() as f64;
                p.a_win_fraction = p.a_wins as f64 / common.len() as f64;
            }
            pairwise.push(p);
        }
    }

    Comparison {
        csv,
        summary: ComparisonSummary {
            schema: SUMMARY_SCHEMA.to_string(),
            layers: layers.len(),
            engines,
            pairwise,
            flags,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(layer: &str, engine: &str, loss: f64) -> LayerReport {
        LayerReport {
            layer: layer.into(),
            engine: engine.into(),
            bits: 4,
            group_size: Some(128),
            beta: 0.0,
            block_size: 128,
            proxy_loss: loss,
            rtn_relative: loss / 2.0,
            wall_time_s: 0.0,
            drift: DriftStats::default(),
        }
    }

    #[test]
    fn proxy_loss_examples() {
        let w = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let h = DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 3.0]]);
        assert_eq!(proxy_loss(&w, &w, &h).unwrap(), 0.0);
        let deq = DenseMatrix::from_rows(&[[1.5, 2.0], [3.0, 3.0]]);
        let id = DenseMatrix::identity(2);
        assert_eq!(proxy_loss(&deq, &w, &id).unwrap(), 0.25 + 1.0);
        // rows: (0.5, 0) -> 0.25*2 = 0.5 ; (0, -1) -> 3
        assert_eq!(proxy_loss(&deq, &w, &h).unwrap(), 3.5);
        assert!(proxy_loss(&deq, &w, &DenseMatrix::identity(3)).is_err());
    }

    #[test]
    fn single_engine_table_keeps_rtn_relative() {
        let c = compare_table(&[report("l0", "rtn", 1.0)]);
        let mut lines = c.csv.lines();
        assert_eq!(lines.next(), Some(CSV_SCHEMA));
        assert!(lines.next().unwrap().contains("rtn_relative"));
        assert_eq!(lines.next(), Some("l0,rtn,4,128,0,128,1,0.5,0,0,0"));
        assert_eq!(c.summary.engines["rtn"].wins, 0);
        assert!(c.summary.pairwise.is_empty());
    }

    #[test]
    fn identical_losses_tie() {
        let c = compare_table(&[report("l0", "gptq", 1.0), report("l0", "foem", 1.0)]);
        assert_eq!(c.summary.engines["gptq"].ties, 1);
        assert_eq!(c.summary.engines["foem"].ties, 1);
        let p = &c.summary.pairwise[0];
        assert_eq!((p.a.as_str(), p.b.as_str()), ("foem", "gptq"));
        assert_eq!(p.ties, 1);
        assert_eq!(p.mean_ratio, 1.0);
    }

    #[test]
    fn ordering_is_stable_and_wins_counted() {
        let a = vec![
            report("l1", "gptq", 2.0),
            report("l0", "rtn", 5.0),
            report("l0", "gptq", 1.0),
            report("l1", "rtn", 3.0),
        ];
        let mut b = a.clone();
        b.reverse();
        let (ca, cb) = (compare_table(&a), compare_table(&b));
        assert_eq!(ca, cb);
        let rows: Vec<&str> = ca.csv.lines().skip(2).map(|l| &l[..7]).collect();
        assert_eq!(rows, ["l0,gptq", "l0,rtn,", "l1,gptq", "l1,rtn,"]);
        assert_eq!(ca.summary.engines["gptq"].wins, 2);
        let p = &ca.summary.pairwise[0];
        assert!((p.mean_ratio - (0.2 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(p.a_win_fraction, 1.0);
    }

    #[test]
    fn inconsistent_layer_sets_are_flagged() {
        let c = compare_table(&[report("l0", "gptq", 1.0), report("l1", "gptq", 1.0), report("l0", "rtn", 2.0)]);
        assert_eq!(c.summary.flags.len(), 1);
        assert!(c.summary.flags[0].contains("rtn"));
    }
}
