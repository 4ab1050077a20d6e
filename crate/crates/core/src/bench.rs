//! Segment-level evaluation, the variant ablation runner, and the diagnostic
//! tables (session distances, fusion weights, group assignments).

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use him_autograd::{Scalar, Tape};
use serde::{Deserialize, Serialize};

use crate::baselines::{train_lr, Popularity};
use crate::config::{HimConfig, Variant};
use crate::data::{Dataset, DatasetSplit, LabeledSample};
use crate::error::{invalid, io_err, Result};
use crate::eval::{auc, Segmenter, UserSegment};
use crate::model::{Batch, HimModel};
use crate::train::train;
use crate::ubp::mean_session_distances;

/// Test AUC overall and per user segment. A segment AUC is `None` when the
/// segment holds a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_all: f64,
    pub auc_segment: [Option<f64>; 3],
    pub n_all: usize,
    pub n_segment: [usize; 3],
}

impl EvalReport {
    pub fn auc(&self, segment: Option<UserSegment>) -> Option<f64> {
        match segment {
            None => Some(self.auc_all),
            Some(s) => self.auc_segment[s.index()],
        }
    }

    pub fn count(&self, segment: Option<UserSegment>) -> usize {
        match segment {
            None => self.n_all,
            Some(s) => self.n_segment[s.index()],
        }
    }
}

/// Segment of every user index from their positive count in the log.
pub fn user_segments(data: &Dataset, segmenter: &Segmenter) -> Vec<UserSegment> {
    segmenter.segment_users(&data.positive_counts())
}

pub fn evaluate(
    scores: &[f64],
    samples: &[LabeledSample],
    segments: &[UserSegment],
) -> Result<EvalReport> {
    if scores.len() != samples.len() {
        return Err(invalid("evaluation", "scores and samples differ in length"));
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let auc_all = auc(scores, &labels)?;
    let mut auc_segment = [None; 3];
    let mut n_segment = [0; 3];
    for seg in UserSegment::ALL {
        let (mut sc, mut lb) = (Vec::new(), Vec::new());
        for ((s, &score), &y) in samples.iter().zip(scores).zip(&labels) {
            if segments[s.user] == seg {
                sc.push(score);
                lb.push(y);
            }
        }
        n_segment[seg.index()] = lb.len();
        if lb.contains(&0) && lb.contains(&1) {
            auc_segment[seg.index()] = Some(auc(&sc, &lb)?);
        }
    }
    Ok(EvalReport {
        auc_all,
        auc_segment,
        n_all: samples.len(),
        n_segment,
    })
}

/// A scorer compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Popularity,
    LogisticRegression,
    Model(Variant),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Popularity => "Popularity",
            Method::LogisticRegression => "LR",
            Method::Model(v) => v.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "popularity" | "pop" => Ok(Method::Popularity),
            "lr" | "logistic" => Ok(Method::LogisticRegression),
            other => Variant::parse(other).map(Method::Model),
        }
    }

    /// The three model variants, in ablation order.
    pub fn variants() -> Vec<Method> {
        Variant::ALL.iter().map(|&v| Method::Model(v)).collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub split_fingerprint: u64,
    /// Wall time of fitting and scoring.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    /// `None` is the whole test set.
    pub segment: Option<UserSegment>,
    pub auc_mean: f64,
    pub auc_std: f64,
    /// Repetitions that produced an AUC for this cell.
    pub runs: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<TableRow>,
}

fn segment_name(segment: Option<UserSegment>) -> &'static str {
    segment.map_or("all", UserSegment::name)
}

const SEGMENT_COLUMNS: [Option<UserSegment>; 4] = [
    None,
    Some(UserSegment::Tailed),
    Some(UserSegment::Body),
    Some(UserSegment::Head),
];

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn from_runs(runs: &[RunRecord]) -> Self {
        let mut methods: Vec<Method> = Vec::new();
        for r in runs {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let mut rows = Vec::new();
        for m in methods {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.method == m).collect();
            for seg in SEGMENT_COLUMNS {
                let aucs: Vec<f64> = mine.iter().filter_map(|r| r.report.auc(seg)).collect();
                let (auc_mean, auc_std) = if aucs.is_empty() {
                    (f64::NAN, f64::NAN)
                } else {
                    mean_std(&aucs)
                };
                rows.push(TableRow {
                    method: m,
                    segment: seg,
                    auc_mean,
                    auc_std,
                    runs: aucs.len(),
                    n_samples: mine[0].report.count(seg),
                });
            }
        }
        Self { rows }
    }

    pub fn get(&self, method: Method, segment: Option<UserSegment>) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.segment == segment)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "segment", "auc_mean", "auc_std", "n_samples"])?;
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                segment_name(r.segment).to_string(),
                format!("{:.6}", r.auc_mean),
                format!("{:.6}", r.auc_std),
                r.n_samples.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| invalid("csv", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Methods as rows, segments as columns, `mean ± std`.
    pub fn to_text(&self) -> String {
        let mut methods: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let mut out = format!("{:<16}", "method");
        for seg in SEGMENT_COLUMNS {
            let _ = write!(out, " {:>17}", segment_name(seg));
        }
        out.push('\n');
        for m in methods {
            let _ = write!(out, "{:<16}", m.name());
            for seg in SEGMENT_COLUMNS {
                match self.get(m, seg) {
                    Some(r) if r.runs > 0 => {
                        let _ = write!(out, " {:>8.4} ± {:<6.4}", r.auc_mean, r.auc_std);
                    }
                    _ => {
                        let _ = write!(out, " {:>17}", "n/a");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Diagnostic tables collected from a trained HIM-family model on a sample set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `(segment, session, mean distance, rows averaged)`.
    pub distances: Vec<(UserSegment, usize, f64, usize)>,
    /// `(segment, mean personalized weight, mean group weight, samples)`.
    pub fusion: Vec<(UserSegment, f64, f64, usize)>,
}

impl Diagnostics {
    pub fn distances_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["segment", "session", "mean_distance"])?;
        for (seg, session, d, _) in &self.distances {
            w.write_record([
                seg.name().to_string(),
                session.to_string(),
                format!("{d:.6}"),
            ])?;
        }
        Ok(
            String::from_utf8(w.into_inner().map_err(|e| invalid("csv", e.to_string()))?)
                .expect("utf-8"),
        )
    }

    pub fn fusion_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "segment",
            "weight_personalized",
            "weight_group",
            "n_samples",
        ])?;
        for (seg, wp, wc, n) in &self.fusion {
            w.write_record([
                seg.name().to_string(),
                format!("{wp:.6}"),
                format!("{wc:.6}"),
                n.to_string(),
            ])?;
        }
        Ok(
            String::from_utf8(w.into_inner().map_err(|e| invalid("csv", e.to_string()))?)
                .expect("utf-8"),
        )
    }
}

/// Averages item-to-negative distances per segment and session and fusion
/// weights per segment over `samples`.
pub fn diagnose<S: Scalar>(
    model: &HimModel<S>,
    data: &Dataset,
    samples: &[LabeledSample],
    segments: &[UserSegment],
    chunk: usize,
) -> Result<Diagnostics> {
    let t = model.spec.ubp.t;
    let n = model.spec.ubp.n;
    let mut dist_sum = vec![[0.0f64; 3]; t];
    let mut dist_count = vec![[0usize; 3]; t];
    let mut fusion_sum = [[0.0f64; 2]; 3];
    let mut fusion_count = [0usize; 3];
    if model.spec.variant == Variant::Base {
        return Ok(Diagnostics::default());
    }
    for part in samples.chunks(chunk.max(1)) {
        let batch = Batch::build(&model.spec, data, part)?;
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &batch, None)?;
        let sessions = batch
            .sessions
            .as_ref()
            .expect("session inputs for session variants");
        if let Some(dv) = f.ubp.as_ref().and_then(|u| u.distances) {
            let d: Vec<f64> = tape.data(dv).iter().map(|v| v.to_f64_lossy()).collect();
            let means = mean_session_distances(&d, &sessions.pos_mask, n);
            for (row, m) in means.iter().enumerate() {
                if let Some(m) = m {
                    let seg = segments[part[row / t].user].index();
                    dist_sum[row % t][seg] += m;
                    dist_count[row % t][seg] += 1;
                }
            }
        }
        if let Some(w) = f.fusion {
            for (r, pair) in tape.data(w).chunks(2).enumerate() {
                let seg = segments[part[r].user].index();
                fusion_sum[seg][0] += pair[0].to_f64_lossy();
                fusion_sum[seg][1] += pair[1].to_f64_lossy();
                fusion_count[seg] += 1;
            }
        }
    }
    let mut out = Diagnostics::default();
    for seg in UserSegment::ALL {
        let s = seg.index();
        for session in 0..t {
            if dist_count[session][s] > 0 {
                out.distances.push((
                    seg,
                    session,
                    dist_sum[session][s] / dist_count[session][s] as f64,
                    dist_count[session][s],
                ));
            }
        }
        if fusion_count[s] > 0 {
            let c = fusion_count[s] as f64;
            out.fusion.push((
                seg,
                fusion_sum[s][0] / c,
                fusion_sum[s][1] / c,
                fusion_count[s],
            ));
        }
    }
    Ok(out)
}

/// One diagnostic sample per user, dated just after their last event, so the
/// most recent session holds that event.
pub fn latest_probes(data: &Dataset) -> Vec<LabeledSample> {
    data.histories
        .iter()
        .enumerate()
        .filter_map(|(user, h)| {
            h.last().map(|e| LabeledSample {
                user,
                item: 0,
                timestamp: e.timestamp + 1,
                label: 0,
            })
        })
        .collect()
}

/// `user,session,group` rows for `probes`.
pub fn group_assignments_csv<S: Scalar>(
    model: &HimModel<S>,
    data: &Dataset,
    probes: &[LabeledSample],
    chunk: usize,
) -> Result<String> {
    let groups = model.group_assignments(data, probes, chunk)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["user", "session", "group"])?;
    for (p, g) in probes.iter().zip(&groups) {
        let user = data.users.token(p.user).unwrap_or("");
        for (session, group) in g.iter().enumerate() {
            w.write_record([user.to_string(), session.to_string(), group.to_string()])?;
        }
    }
    Ok(
        String::from_utf8(w.into_inner().map_err(|e| invalid("csv", e.to_string()))?)
            .expect("utf-8"),
    )
}

/// Everything an ablation produces.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub runs: Vec<RunRecord>,
    pub table: AblationTable,
    /// Diagnostics of the HIM run with the first seed, when HIM was part of the ablation.
    pub diagnostics: Option<Diagnostics>,
    /// Group assignments CSV for the same run.
    pub groups_csv: Option<String>,
    /// Per HIM repetition, its seed and the hard group per session of every
    /// [`latest_probes`] entry.
    pub probe_groups: Vec<(u64, Vec<Vec<usize>>)>,
}

/// Trains every method `repetitions` times on the same split. Repetition `r`
/// uses seed `config.seed + r` for initialization, batch order and group-loss
/// negatives; the split never changes.
pub fn run_ablation(
    config: &HimConfig,
    data: &Dataset,
    split: &DatasetSplit,
    methods: &[Method],
    repetitions: usize,
) -> Result<Ablation> {
    if repetitions == 0 || methods.is_empty() {
        return Err(invalid(
            "ablation",
            "needs at least one method and one repetition",
        ));
    }
    if split.test.is_empty() {
        return Err(invalid("ablation", "empty test split"));
    }
    let fingerprint = split.fingerprint();
    let segmenter = Segmenter {
        tailed_below: config.tailed_below,
        head_above: config.head_above,
    };
    let segments = user_segments(data, &segmenter);
    let mut runs = Vec::new();
    let mut diagnostics = None;
    let mut groups_csv = None;
    let mut probe_groups = Vec::new();
    let probes = latest_probes(data);
    for r in 0..repetitions {
        let seed = config.seed + r as u64;
        for &method in methods {
            let mut cfg = config.clone();
            cfg.seed = seed;
            log::info!("ablation: {method} seed {seed} split {fingerprint:016x}");
            let start = Instant::now();
            let (scores, best_epoch) = match method {
                Method::Popularity => (
                    Popularity::fit(data.items.size(), &split.train)?.predict(&split.test),
                    0,
                ),
                Method::LogisticRegression => {
                    let (lr, trace) = train_lr::<f64>(&cfg, data, split)?;
                    (
                        lr.predict(data, &split.test, cfg.eval_batch_size)?,
                        best_of(&trace),
                    )
                }
                Method::Model(v) => {
                    cfg.variant = v;
                    let out = train::<f64>(&cfg, data, split)?;
                    if v == Variant::Him {
                        if r == 0 {
                            diagnostics = Some(diagnose(
                                &out.model,
                                data,
                                &split.test,
                                &segments,
                                cfg.eval_batch_size,
                            )?);
                            groups_csv = Some(group_assignments_csv(
                                &out.model,
                                data,
                                &probes,
                                cfg.eval_batch_size,
                            )?);
                        }
                        probe_groups.push((
                            seed,
                            out.model
                                .group_assignments(data, &probes, cfg.eval_batch_size)?,
                        ));
                    }
                    (
                        out.model.predict(data, &split.test, cfg.eval_batch_size)?,
                        out.best_epoch,
                    )
                }
            };
            let report = evaluate(&scores, &split.test, &segments)?;
            log::info!(
                "ablation: {method} seed {seed} test auc {:.5}",
                report.auc_all
            );
            runs.push(RunRecord {
                method,
                seed,
                report,
                best_epoch,
                split_fingerprint: fingerprint,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    let table = AblationTable::from_runs(&runs);
    Ok(Ablation {
        runs,
        table,
        diagnostics,
        groups_csv,
        probe_groups,
    })
}

fn best_of(trace: &[crate::train::EpochStats]) -> usize {
    trace
        .iter()
        .filter_map(|s| s.validation_auc.map(|a| (a, s.epoch)))
        .fold(None, |best: Option<(f64, usize)>, (a, e)| match best {
            Some((b, _)) if b >= a => best,
            _ => Some((a, e)),
        })
        .map_or(trace.len().saturating_sub(1), |(_, e)| e)
}

impl Ablation {
    /// Writes `report.csv`, `report.txt`, `runs.json` and the diagnostic CSVs into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(io_err(&p))
        };
        put("report.csv", self.table.to_csv()?)?;
        put("report.txt", self.table.to_text())?;
        put("runs.json", serde_json::to_string_pretty(&self.runs)?)?;
        if let Some(d) = &self.diagnostics {
            put("distances.csv", d.distances_csv()?)?;
            put("fusion.csv", d.fusion_csv()?)?;
        }
        if let Some(g) = &self.groups_csv {
            put("groups.csv", g.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Popularity, Method::LogisticRegression]
            .into_iter()
            .chain(Method::variants())
        {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
    }
}
