//! Experiment drivers: data scarcity, knowledge error, generalization and
//! the headline comparison, each repeated over seeds.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sha256_hex, LabeledDataset, LabeledRecord, SampleInput, Split};
use crate::eval::{evaluate, EvalReport, EvalSettings};
use crate::model::SecurityThresholds;
use crate::nn::seeded_rng;
use crate::train::{
    extend_with_cn, train_baseline, BaselineData, BaselineKind, LabeledSet, PipelineConfig, TrainError, TrainedBaseline,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Scarcity,
    KnowledgeError,
    Generalization,
    Headline,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "scarcity" => Some(Self::Scarcity),
            "knowledge_error" => Some(Self::KnowledgeError),
            "generalization" => Some(Self::Generalization),
            "headline" => Some(Self::Headline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentManifest {
    pub kinds: Vec<BaselineKind>,
    pub seeds: Vec<u64>,
    /// Labelled training sizes. Empty means the whole training split.
    pub sizes: Vec<usize>,
    /// T_R errors for the knowledge-error study.
    pub t_r_errors: Vec<f64>,
    /// Validation records used for checkpoint selection.
    pub val_size: usize,
    /// Unlabelled training inputs handed to the corrector per run.
    pub unlabeled_cap: usize,
    pub pipeline: PipelineConfig,
    pub thresholds: SecurityThresholds,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            kinds: vec![BaselineKind::Dd, BaselineKind::GlCn],
            seeds: vec![0, 1, 2, 3, 4],
            sizes: Vec::new(),
            t_r_errors: vec![0.0, 0.35],
            val_size: 512,
            unlabeled_cap: 2048,
            pipeline: PipelineConfig::default(),
            thresholds: SecurityThresholds::default(),
        }
    }
}

impl ExperimentManifest {
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let d = Self::default();
        match kind {
            ExperimentKind::Scarcity => Self { sizes: vec![64, 256, 1024], ..d },
            ExperimentKind::KnowledgeError => {
                Self { kinds: vec![BaselineKind::Dd, BaselineKind::Gl, BaselineKind::GlCn], sizes: vec![256], ..d }
            }
            ExperimentKind::Generalization => d,
            ExperimentKind::Headline => Self { kinds: BaselineKind::ALL.to_vec(), seeds: vec![0], ..d },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub kind: BaselineKind,
    pub seed: u64,
    pub size: usize,
    pub t_r_error: f64,
    pub report: EvalReport,
    #[serde(skip)]
    pub trained: Option<TrainedBaseline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub kind: BaselineKind,
    pub size: usize,
    pub t_r_error: f64,
    pub runs: usize,
    pub mape_mean: f64,
    pub mape_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub manifest: ExperimentManifest,
    pub dataset_sha256: String,
    pub manifest_sha256: String,
    pub eval_split: Split,
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    /// Set when a run failed; `runs` then holds what finished before it.
    pub failure: Option<String>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

pub fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(BaselineKind, usize, u64)> =
        runs.iter().map(|r| (r.kind, r.size, r.t_r_error.to_bits())).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(kind, size, e)| {
            let sel: Vec<&RunResult> =
                runs.iter().filter(|r| r.kind == kind && r.size == size && r.t_r_error.to_bits() == e).collect();
            let (mape_mean, mape_std) = mean_std(&sel.iter().map(|r| r.report.mape_overall).collect::<Vec<_>>());
            let (accuracy_mean, accuracy_std) =
                mean_std(&sel.iter().map(|r| r.report.class_accuracy).collect::<Vec<_>>());
            SummaryRow { kind, size, t_r_error: f64::from_bits(e), runs: sel.len(), mape_mean, mape_std, accuracy_mean, accuracy_std }
        })
        .collect()
}

/// Training subset for one seed: a seeded shuffle of the training split,
/// the first `size` labelled and up to `cap` of the rest unlabelled.
pub fn seeded_subset<'a>(
    train: &[&'a LabeledRecord],
    size: Option<usize>,
    cap: usize,
    seed: u64,
) -> (Vec<&'a LabeledRecord>, Vec<&'a SampleInput>) {
    let Some(size) = size.filter(|&s| s < train.len()) else {
        return (train.to_vec(), Vec::new());
    };
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut seeded_rng(seed, 0x5ca7));
    let labeled = idx[..size].iter().map(|&i| train[i]).collect();
    let unlabeled = idx[size..].iter().take(cap).map(|&i| &train[i].input).collect();
    (labeled, unlabeled)
}

/// Trains every requested kind on one data set. GL_CN reuses the GL
/// stages when both are requested, which gives the same result as
/// training it from scratch.
pub fn train_kinds(kinds: &[BaselineKind], data: &BaselineData, cfg: &PipelineConfig) -> Result<Vec<TrainedBaseline>, TrainError> {
    let mut out: Vec<TrainedBaseline> = Vec::with_capacity(kinds.len());
    let mut gl: Option<TrainedBaseline> = None;
    for &k in kinds {
        let t = match k {
            BaselineKind::Gl | BaselineKind::GlCn => {
                if gl.is_none() {
                    gl = Some(train_baseline(BaselineKind::Gl, data, cfg)?);
                }
                let g = gl.as_ref().expect("set above");
                if k == BaselineKind::Gl {
                    g.clone()
                } else {
                    extend_with_cn(g, data, cfg)?
                }
            }
            _ => train_baseline(k, data, cfg)?,
        };
        out.push(t);
    }
    Ok(out)
}

struct Job {
    seed: u64,
    size: Option<usize>,
    t_r_error: f64,
}

pub fn run_experiment(experiment: ExperimentKind, manifest: &ExperimentManifest, dataset: &LabeledDataset) -> ExperimentReport {
    let train = dataset.split(Split::Train);
    let val: Vec<&LabeledRecord> = dataset.split(Split::Val).into_iter().take(manifest.val_size.max(1)).collect();
    let eval_split = if experiment == ExperimentKind::Generalization { Split::Generalization } else { Split::Test };
    let eval_records = dataset.split(eval_split);
    let eval_set = LabeledSet::from_records(&eval_records);
    let ctxs: Vec<_> = eval_set.samples.iter().map(|s| s.ctx).collect();
    let settings = EvalSettings {
        thresholds: manifest.thresholds,
        kc_weights: manifest.pipeline.cn.kc_weights,
        ..EvalSettings::new(dataset.f_n())
    };
    let sizes: Vec<Option<usize>> =
        if manifest.sizes.is_empty() { vec![None] } else { manifest.sizes.iter().map(|&s| Some(s)).collect() };
    let errors = if experiment == ExperimentKind::KnowledgeError { manifest.t_r_errors.clone() } else { vec![0.0] };
    let mut jobs = Vec::new();
    for &seed in &manifest.seeds {
        for &size in &sizes {
            for &t_r_error in &errors {
                jobs.push(Job { seed, size, t_r_error });
            }
        }
    }
    let outcomes: Vec<Result<Vec<RunResult>, String>> = jobs
        .par_iter()
        .map(|job| {
            if eval_records.is_empty() {
                return Err(format!("no {} records to evaluate", eval_split.as_str()));
            }
            let mut cfg = manifest.pipeline.with_seed(job.seed);
            cfg.knowledge.sampler.t_r_error = job.t_r_error;
            let (labeled, unlabeled) = seeded_subset(&train, job.size, manifest.unlabeled_cap, job.seed);
            let data = BaselineData {
                train: LabeledSet::from_records(&labeled),
                val: LabeledSet::from_records(&val),
                unlabeled,
                knowledge: None,
            };
            let trained = train_kinds(&manifest.kinds, &data, &cfg).map_err(|e| e.to_string())?;
            trained
                .into_iter()
                .map(|t| {
                    let preds = t.predictor.predict(&eval_set.samples).map_err(|e| e.to_string())?;
                    let report = evaluate(t.kind.as_str(), &preds, &eval_set.labels, &ctxs, &settings)
                        .map_err(|e| e.to_string())?;
                    Ok(RunResult {
                        kind: t.kind,
                        seed: job.seed,
                        size: labeled.len(),
                        t_r_error: job.t_r_error,
                        report,
                        trained: Some(t),
                    })
                })
                .collect()
        })
        .collect();
    let mut runs = Vec::new();
    let mut failure = None;
    for o in outcomes {
        match o {
            Ok(r) => runs.extend(r),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    let manifest_json = serde_json::to_string(manifest).expect("manifest serializes");
    ExperimentReport {
        experiment,
        manifest: manifest.clone(),
        dataset_sha256: dataset.manifest.records_sha256.clone(),
        manifest_sha256: sha256_hex(manifest_json.as_bytes()),
        eval_split,
        summary: summarize(&runs),
        runs,
        failure,
    }
}

pub fn runs_to_csv(runs: &[RunResult]) -> String {
    let rows: Vec<(String, EvalReport)> = runs
        .iter()
        .map(|r| (format!("seed{}_n{}_err{}", r.seed, r.size, r.t_r_error), r.report.clone()))
        .collect();
    crate::eval::reports_to_csv(&rows)
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("kind,size,t_r_error,runs,mape_mean,mape_std,accuracy_mean,accuracy_std\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.kind.as_str(),
            r.size,
            r.t_r_error,
            r.runs,
            r.mape_mean,
            r.mape_std,
            r.accuracy_mean,
            r.accuracy_std
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{label_dataset, BenchmarkConfig, Scenario};
    use crate::sim::SimConfig;

    fn small() -> LabeledDataset {
        let cfg = BenchmarkConfig {
            n_buses: 12,
            n_gen: 5,
            levels: vec![0.4, 0.5],
            conditions_per_level: 2,
            generalization_conditions: 1,
            n_faults: 8,
            sim: SimConfig { dt: 0.02, ..SimConfig::default() },
            ..BenchmarkConfig::default()
        };
        label_dataset(&Scenario::build(&cfg).unwrap(), false).unwrap()
    }

    #[test]
    fn subsets_are_nested_and_disjoint_from_the_pool() {
        let ds = small();
        let train = ds.split(Split::Train);
        let (a, pool) = seeded_subset(&train, Some(3), 100, 7);
        let (b, _) = seeded_subset(&train, Some(6), 100, 7);
        assert_eq!(a.len(), 3);
        assert_eq!(pool.len(), train.len() - 3);
        let ids = |v: &[&LabeledRecord]| v.iter().map(|r| r.record_id).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b)[..3]);
        for s in &pool {
            assert!(a.iter().all(|r| !std::ptr::eq(&r.input, *s)));
        }
        let (c, _) = seeded_subset(&train, Some(3), 100, 8);
        assert_ne!(ids(&a), ids(&c));
        let (all, none) = seeded_subset(&train, None, 100, 7);
        assert_eq!((all.len(), none.len()), (train.len(), 0));
        assert_eq!(seeded_subset(&train, Some(3), 2, 7).1.len(), 2);
    }

    #[test]
    fn knowledge_only_experiment_summarises_per_size() {
        let ds = small();
        let manifest = ExperimentManifest {
            kinds: vec![BaselineKind::Kd],
            seeds: vec![0, 1],
            sizes: vec![3, 5],
            ..ExperimentManifest::default()
        };
        let r = run_experiment(ExperimentKind::Scarcity, &manifest, &ds);
        assert!(r.failure.is_none());
        assert_eq!(r.eval_split, Split::Test);
        assert_eq!(r.runs.len(), 4);
        assert_eq!(r.summary.len(), 2);
        for row in &r.summary {
            assert_eq!(row.runs, 2);
            // The closed form ignores the training data.
            assert_eq!(row.mape_std, 0.0);
        }
        assert_eq!(r.dataset_sha256, ds.manifest.records_sha256);
        let g = run_experiment(ExperimentKind::Generalization, &manifest, &ds);
        assert_eq!(g.eval_split, Split::Generalization);
        assert_eq!(runs_to_csv(&r.runs).lines().count(), 5);
        assert_eq!(summary_to_csv(&r.summary).lines().count(), 3);
    }

    #[test]
    fn mean_and_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn kinds_parse_and_presets() {
        assert_eq!(ExperimentKind::parse("knowledge-error"), Some(ExperimentKind::KnowledgeError));
        assert_eq!(ExperimentKind::parse("headline"), Some(ExperimentKind::Headline));
        assert_eq!(ExperimentKind::parse("nope"), None);
        assert_eq!(ExperimentManifest::for_kind(ExperimentKind::Scarcity).sizes, vec![64, 256, 1024]);
        assert_eq!(ExperimentManifest::for_kind(ExperimentKind::Headline).kinds.len(), 6);
        let json = serde_json::to_string(&ExperimentManifest::default()).unwrap();
        let back: ExperimentManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ExperimentManifest::default());
        let partial: ExperimentManifest = serde_json::from_str(r#"{"seeds":[9]}"#).unwrap();
        assert_eq!(partial.seeds, vec![9]);
    }
}
