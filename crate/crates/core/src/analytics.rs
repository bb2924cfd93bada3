//! Per-token routing statistics: expert utilization, task-by-expert
//! affinity and Jensen-Shannon divergence between tasks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::{DecoderModel, FfnSlot};
use crate::taskgen::{TaskKind, TaskSample};
use crate::tensor::{no_grad, Float};

/// Smoothing added to every count before normalising a row for JSD.
pub const JSD_EPS: f64 = 1e-12;

/// One token's routing decision in one MoLoRA slot.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub layer: usize,
    pub slot: FfnSlot,
    pub position: usize,
    pub task: TaskKind,
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace {
    pub n_experts: usize,
    pub records: Vec<RoutingRecord>,
}

impl RoutingTrace {
    pub fn new(n_experts: usize) -> Self {
        Self {
            n_experts,
            records: Vec::new(),
        }
    }

    /// Record routing of every MoLoRA slot for the full token sequence of
    /// each sample.
    pub fn collect<T: Float>(model: &DecoderModel<T>, samples: &[TaskSample]) -> Result<Self> {
        let mut trace = Self::new(model.config.adapter.n_experts);
        for s in samples {
            let tokens = s.tokens();
            let inputs = &tokens[..tokens.len() - 1];
            let (_, slots) = no_grad(|| model.forward_traced(inputs))?;
            for sr in slots {
                for position in 0..sr.routing.rows() {
                    let (experts, weights) = sr.routing.token(position);
                    trace.records.push(RoutingRecord {
                        layer: sr.layer,
                        slot: sr.slot,
                        position,
                        task: s.task,
                        experts: experts.to_vec(),
                        weights: weights.to_vec(),
                    });
                }
            }
        }
        Ok(trace)
    }

    fn slot_records(&self, layer: usize, slot: FfnSlot) -> impl Iterator<Item = &RoutingRecord> {
        self.records.iter().filter(move |r| r.layer == layer && r.slot == slot)
    }

    /// Distinct `(layer, slot)` pairs present, in order.
    pub fn slots(&self) -> Vec<(usize, FfnSlot)> {
        let mut v: Vec<_> = self.records.iter().map(|r| (r.layer, r.slot)).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Serialise as CSV: `layer,slot,position,task,experts,weights` with the
    /// K indices and weights `;`-joined. Weights use shortest round-trip
    /// formatting so a re-read trace is bit-identical.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "# n_experts={}", self.n_experts)?;
        writeln!(out, "layer,slot,position,task,experts,weights")?;
        for r in &self.records {
            let experts: Vec<String> = r.experts.iter().map(usize::to_string).collect();
            let weights: Vec<String> = r.weights.iter().map(f64::to_string).collect();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.layer,
                r.slot,
                r.position,
                r.task,
                experts.join(";"),
                weights.join(";")
            )?;
        }
        Ok(())
    }

    pub fn read_csv(input: impl BufRead) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::config(format!("trace line {line}"), what.to_string());
        let mut lines = input.lines().enumerate();
        let mut trace = Self::default();
        let (_, first) = lines.next().ok_or_else(|| Error::Empty("routing trace".into()))?;
        let n = first?
            .strip_prefix("# n_experts=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(1, "missing `# n_experts=` header"))?;
        trace.n_experts = n;
        lines.next();
        for (i, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 1, "expected 6 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
            let experts = f[4].split(';').map(num).collect::<Result<Vec<_>>>()?;
            let weights = f[5]
                .split(';')
                .map(|s| s.parse::<f64>().map_err(|_| bad(i + 1, "bad weight")))
                .collect::<Result<Vec<_>>>()?;
            if experts.len() != weights.len() || experts.iter().any(|&e| e >= n) {
                return Err(bad(i + 1, "inconsistent expert list"));
            }
            trace.records.push(RoutingRecord {
                layer: num(f[0])?,
                slot: FfnSlot::parse(f[1]).ok_or_else(|| bad(i + 1, "unknown slot"))?,
                position: num(f[2])?,
                task: f[3].parse()?,
                experts,
                weights,
            });
        }
        Ok(trace)
    }
}

/// Fraction of token-routings sent to each expert, counting each of the K
/// selections once.
pub fn utilization(trace: &RoutingTrace, layer: usize, slot: FfnSlot) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; trace.n_experts];
    for r in trace.slot_records(layer, slot) {
        for &e in &r.experts {
            counts[e] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty(format!("routing trace for layer {layer} slot {slot}")));
    }
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

/// Jensen-Shannon divergence in bits between two count or probability
/// vectors, each smoothed by [`JSD_EPS`] and normalised first.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    let norm = |v: &[f64]| {
        let s: f64 = v.iter().map(|x| x + JSD_EPS).sum();
        v.iter().map(|x| (x + JSD_EPS) / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    let kl = |a: &[f64], m: &[f64]| a.iter().zip(m).map(|(x, y)| x * (x / y).log2()).sum::<f64>();
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)).clamp(0.0, 1.0)
}

/// Task-by-expert routing frequencies for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAffinity {
    pub tasks: Vec<TaskKind>,
    /// `tasks.len() × N`, each row a distribution.
    pub matrix: Vec<Vec<f64>>,
    /// `jsd[i][j]` between tasks `i` and `j`, in bits.
    pub jsd: Vec<Vec<f64>>,
    /// Tasks without any routed token in this slot.
    pub excluded: Vec<TaskKind>,
}

impl TaskAffinity {
    /// Mean JSD over unordered task pairs.
    pub fn mean_pairwise_jsd(&self) -> f64 {
        let n = self.tasks.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += self.jsd[i][j];
            }
        }
        sum / (n * (n - 1) / 2) as f64
    }
}

pub fn task_affinity(trace: &RoutingTrace, layer: usize, slot: FfnSlot) -> Result<TaskAffinity> {
    let mut counts: BTreeMap<TaskKind, Vec<usize>> = BTreeMap::new();
    let mut seen: BTreeMap<TaskKind, ()> = BTreeMap::new();
    for r in &trace.records {
        seen.insert(r.task, ());
    }
    for r in trace.slot_records(layer, slot) {
        let row = counts.entry(r.task).or_insert_with(|| vec![0; trace.n_experts]);
        for &e in &r.experts {
            row[e] += 1;
        }
    }
    let excluded: Vec<TaskKind> = seen.keys().filter(|t| !counts.contains_key(t)).copied().collect();
    for t in &excluded {
        eprintln!("warning: task {t} has no routed tokens in layer {layer} slot {slot}; excluded");
    }
    if counts.len() < 2 {
        return Err(Error::Empty(format!(
            "task affinity needs at least two tasks in layer {layer} slot {slot}"
        )));
    }
    let tasks: Vec<TaskKind> = counts.keys().copied().collect();
    let matrix: Vec<Vec<f64>> = counts
        .values()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| c as f64 / total as f64).collect()
        })
        .collect();
    let jsd = matrix
        .iter()
        .map(|p| matrix.iter().map(|q| jensen_shannon(p, q)).collect())
        .collect();
    Ok(TaskAffinity {
        tasks,
        matrix,
        jsd,
        excluded,
    })
}

/// Per-slot summary row.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSummary {
    pub layer: usize,
    pub slot: FfnSlot,
    pub utilization: Vec<f64>,
    pub mean_jsd: Option<f64>,
}

pub fn summarize(trace: &RoutingTrace) -> Result<Vec<SlotSummary>> {
    trace
        .slots()
        .into_iter()
        .map(|(layer, slot)| {
            Ok(SlotSummary {
                layer,
                slot,
                utilization: utilization(trace, layer, slot)?,
                mean_jsd: task_affinity(trace, layer, slot).ok().map(|a| a.mean_pairwise_jsd()),
            })
        })
        .collect()
}

/// Machine-readable summary: `layer,slot,mean_jsd,util_0..util_{N-1}`.
pub fn summary_csv(rows: &[SlotSummary], mut out: impl Write) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.utilization.len());
    let mut header = "layer,slot,mean_jsd".to_string();
    for e in 0..n {
        write!(header, ",util_{e}").unwrap();
    }
    writeln!(out, "{header}")?;
    for r in rows {
        let jsd = r.mean_jsd.map_or(String::new(), |j| format!("{j:.6}"));
        let util: Vec<String> = r.utilization.iter().map(|u| format!("{u:.6}")).collect();
        writeln!(out, "{},{},{},{}", r.layer, r.slot, jsd, util.join(","))?;
    }
    Ok(())
}

/// Human-readable table of the same summary.
pub fn summary_table(rows: &[SlotSummary]) -> String {
    let mut s = String::new();
    let n = rows.first().map_or(0, |r| r.utilization.len());
    write!(s, "{:>5} {:>5} {:>8} ", "layer", "slot", "jsd").unwrap();
    for e in 0..n {
        write!(s, "{:>6}", format!("e{e}")).unwrap();
    }
    s.push('\n');
    for r in rows {
        let jsd = r.mean_jsd.map_or("-".to_string(), |j| format!("{j:.4}"));
        write!(s, "{:>5} {:>5} {:>8} ", r.layer, r.slot.name(), jsd).unwrap();
        for u in &r.utilization {
            write!(s, "{:>6.3}", u).unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AdapterConfig, ModelConfig};

    fn record(task: TaskKind, experts: Vec<usize>) -> RoutingRecord {
        let k = experts.len();
        RoutingRecord {
            layer: 0,
            slot: FfnSlot::Gate,
            position: 0,
            task,
            experts,
            weights: vec![1.0 / k as f64; k],
        }
    }

    #[test]
    fn single_token_splits_evenly_between_its_experts() {
        let trace = RoutingTrace {
            n_experts: 8,
            records: vec![record(TaskKind::Copy, vec![2, 5])],
        };
        let u = utilization(&trace, 0, FfnSlot::Gate).unwrap();
        assert_eq!(u, vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.0]);
        assert!(matches!(utilization(&trace, 1, FfnSlot::Gate), Err(Error::Empty(_))));
    }

    #[test]
    fn zero_router_sends_everything_to_the_first_two_experts() {
        let cfg = ModelConfig {
            vocab_size: crate::taskgen::VOCAB_SIZE,
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            adapter: AdapterConfig {
                rank: 2,
                n_experts: 4,
                top_k: 2,
                router_init_std: 0.0,
                ..AdapterConfig::default()
            },
            ..ModelConfig::default()
        };
        let model: DecoderModel<f64> = DecoderModel::new(cfg, 0).unwrap();
        let samples = crate::taskgen::mixture([5; 4], &Default::default(), 0).unwrap().train;
        let trace = RoutingTrace::collect(&model, &samples).unwrap();
        for (layer, slot) in trace.slots() {
            assert_eq!(utilization(&trace, layer, slot).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        }
    }

    #[test]
    fn jsd_extremes() {
        assert_eq!(jensen_shannon(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert!(jensen_shannon(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) < 1e-15);
        let d = jensen_shannon(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0]);
        assert!((d - 1.0).abs() < 1e-9, "{d}");
        // Independent reference: scipy.spatial.distance.jensenshannon(p, q, base=2)**2
        let d = jensen_shannon(&[0.5, 0.5], &[0.9, 0.1]);
        assert!((d - 0.14679310243605215).abs() < 1e-9, "{d}");
    }

    #[test]
    fn affinity_rows_are_distributions_and_identical_tasks_have_zero_jsd() {
        let records = vec![
            record(TaskKind::Copy, vec![0, 1]),
            record(TaskKind::Sort, vec![0, 1]),
            record(TaskKind::Add, vec![2, 3]),
        ];
        let trace = RoutingTrace { n_experts: 4, records };
        let a = task_affinity(&trace, 0, FfnSlot::Gate).unwrap();
        assert_eq!(a.tasks, vec![TaskKind::Copy, TaskKind::Sort, TaskKind::Add]);
        for row in &a.matrix {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(a.jsd[0][1], 0.0);
        assert!((a.jsd[0][2] - 1.0).abs() < 1e-9);
        assert!((a.mean_pairwise_jsd() - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn affinity_needs_two_tasks_and_excludes_silent_ones() {
        let mut other = record(TaskKind::Add, vec![0, 1]);
        other.layer = 1;
        let trace = RoutingTrace {
            n_experts: 4,
            records: vec![record(TaskKind::Copy, vec![0, 1]), other],
        };
        assert!(task_affinity(&trace, 0, FfnSlot::Gate).is_err());
        let mut trace = trace;
        trace.records.push(record(TaskKind::Sort, vec![2, 3]));
        let a = task_affinity(&trace, 0, FfnSlot::Gate).unwrap();
        assert_eq!(a.excluded, vec![TaskKind::Add]);
    }

    #[test]
    fn csv_round_trip_preserves_statistics_exactly() {
        let cfg = ModelConfig {
            model_dim: 16,
            n_layers: 2,
            n_heads: 2,
            adapter: AdapterConfig {
                rank: 2,
                n_experts: 4,
                router_init_std: 0.5,
                ..AdapterConfig::default()
            },
            ..ModelConfig::default()
        };
        let model: DecoderModel<f32> = DecoderModel::new(cfg, 1).unwrap();
        let samples = crate::taskgen::mixture([4; 4], &Default::default(), 2).unwrap().train;
        let trace = RoutingTrace::collect(&model, &samples).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let back = RoutingTrace::read_csv(&buf[..]).unwrap();
        assert_eq!(back, trace);
        for (layer, slot) in trace.slots() {
            assert_eq!(
                utilization(&trace, layer, slot).unwrap(),
                utilization(&back, layer, slot).unwrap()
            );
            let u = utilization(&trace, layer, slot).unwrap();
            assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for r in &trace.records {
            assert_eq!(r.experts.len(), 2);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let rows = summarize(&trace).unwrap();
        assert_eq!(rows.len(), 6);
        let mut csv = Vec::new();
        summary_csv(&rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
        assert!(summary_table(&rows).contains("gate"));
    }
}
