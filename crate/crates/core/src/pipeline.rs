//! End-to-end orchestration: configuration, dataset generation or
//! ingestion, stage-wise training, explanation, clustering, risk
//! stratification, minimized-model studies, and report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{
    correct_rate, cut_tree, ward_cluster, zscore_columns, ClusterAssignment, Dendrogram,
    SpaceComparison,
};
use crate::data::{Cohort, Stage, TrajectoryCohort};
use crate::embed::{pca_project, tsne_with_config, Embedding2D, TsneConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::models::{
    kfold_cv_with_folds, stratified_folds, train_gbm, train_logreg, Classifier, EvalReport,
    GbmModel, TrainConfig,
};
use crate::scalar::Scalar;
use crate::shap::{build_shap_matrix, global_importance, importance_for_rows, ShapMatrix};
use crate::svg::scatter_svg;
use crate::synth::{generate_cohort, SyntheticConfig};
use crate::temporal::{
    build_design_matrix, clean_outliers, impute_locf, quantile, StaticFeatures,
};

/// Where the cohort comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticConfig<f64>),
    Csv {
        trajectories: PathBuf,
        boundaries: PathBuf,
        outcomes: PathBuf,
        #[serde(default)]
        statics: Option<PathBuf>,
    },
}

/// One requested stage window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSelector {
    pub stage: Stage,
    pub cumulative: bool,
}

impl StageSelector {
    pub fn label(&self) -> String {
        if self.cumulative {
            format!("{}+", self.stage)
        } else {
            self.stage.to_string()
        }
    }

    /// pre, intra, post in both independent and cumulative variants.
    pub fn all_six() -> Vec<StageSelector> {
        let mut out = Vec::new();
        for cumulative in [false, true] {
            for stage in Stage::ALL {
                out.push(StageSelector { stage, cumulative });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelChoice {
    Gbm,
    Logreg { epochs: usize, step: f64, l2: f64 },
}

impl Default for ModelChoice {
    fn default() -> Self {
        ModelChoice::Gbm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapSettings {
    pub export_matrix: bool,
    pub per_phenotype: bool,
}

impl Default for ShapSettings {
    fn default() -> Self {
        ShapSettings {
            export_matrix: true,
            per_phenotype: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSettings {
    pub enabled: bool,
    pub pca: bool,
    pub tsne: bool,
    pub perplexity: f64,
    pub iterations: usize,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        EmbedSettings {
            enabled: true,
            pca: true,
            tsne: true,
            perplexity: 30.0,
            iterations: 1000,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_cv_folds() -> usize {
    10
}

fn default_cluster_ks() -> Vec<usize> {
    vec![2, 3, 4]
}

fn default_top_n() -> Vec<usize> {
    vec![5, 10, 20]
}

/// Full run configuration; the JSON config file mirrors these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default = "StageSelector::all_six")]
    pub stages: Vec<StageSelector>,
    #[serde(default)]
    pub model: ModelChoice,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub shap: ShapSettings,
    #[serde(default = "default_cluster_ks")]
    pub cluster_ks: Vec<usize>,
    #[serde(default)]
    pub embedding: EmbedSettings,
    #[serde(default = "default_top_n")]
    pub top_n: Vec<usize>,
    /// Output directory; excluded from the config hash so identical runs
    /// into different directories emit byte-identical artifacts.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSource::Synthetic(SyntheticConfig::default()),
            stages: StageSelector::all_six(),
            model: ModelChoice::default(),
            train: TrainConfig::default(),
            cv_folds: default_cv_folds(),
            shap: ShapSettings::default(),
            cluster_ks: default_cluster_ks(),
            embedding: EmbedSettings::default(),
            top_n: default_top_n(),
            out_dir: default_out_dir(),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        let config: RunConfig = io::read_json(path)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("stages", "stage list must be non-empty"));
        }
        if self.cv_folds < 2 {
            return Err(Error::invalid("cv_folds", "need at least 2 folds"));
        }
        if self.cluster_ks.iter().any(|&k| k == 0) {
            return Err(Error::invalid("cluster_ks", "cut sizes must be positive"));
        }
        self.train.validate()?;
        match &self.dataset {
            DatasetSource::Synthetic(synth) => synth.validate()?,
            DatasetSource::Csv {
                trajectories,
                boundaries,
                outcomes,
                statics,
            } => {
                for (name, path) in [
                    ("trajectories", Some(trajectories)),
                    ("boundaries", Some(boundaries)),
                    ("outcomes", Some(outcomes)),
                    ("statics", statics.as_ref()),
                ] {
                    if let Some(path) = path {
                        if !path.exists() {
                            return Err(Error::invalid(
                                name,
                                format!("path `{}` does not exist", path.display()),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical config JSON with `out_dir` normalized away.
    pub fn config_hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.out_dir = PathBuf::new();
        let json = serde_json::to_string(&normalized).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable sub-seed for a named pipeline component.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    splitmix64(master ^ h)
}

// ---------------------------------------------------------------------
// report types
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub n_rows: usize,
    pub n_features: usize,
    pub eval: EvalReport<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedStage {
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from_stage: String,
    pub to_stage: String,
    /// counts[from_band][to_band], bands ordered low/medium/high
    pub counts: [[usize; 3]; 3],
}

/// Patients banded by risk tertiles of the earliest requested cumulative
/// stage, with the same thresholds reused at later stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskBandTable {
    pub stages: Vec<String>,
    pub thresholds: (f64, f64),
    /// per stage: patients per band (low/medium/high)
    pub counts: Vec<[usize; 3]>,
    /// per stage: positive-label fraction per band (NaN-free: 0 when empty)
    pub positive_rate: Vec<[f64; 3]>,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizedRow {
    pub n: usize,
    pub features: Vec<String>,
    pub eval: EvalReport<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizedTable {
    pub rows: Vec<MinimizedRow>,
    pub full: EvalReport<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Resolved configuration with `out_dir` normalized away.
    pub config: RunConfig,
    pub fold_fingerprint: String,
    pub stages: Vec<StageReport>,
    pub skipped_stages: Vec<SkippedStage>,
    pub comparisons: Vec<SpaceComparison<f64>>,
    pub importance: Vec<(String, f64)>,
    pub per_phenotype_importance: BTreeMap<String, Vec<(String, f64)>>,
    pub risk_bands: Option<RiskBandTable>,
    pub minimized: Option<MinimizedTable>,
    pub outputs: Vec<OutputFile>,
}

#[derive(Serialize)]
struct Provenanced<'a, T: Serialize> {
    config_hash: &'a str,
    data: &'a T,
}

// ---------------------------------------------------------------------
// risk stratification and minimized models
// ---------------------------------------------------------------------

fn band_of(score: f64, thresholds: (f64, f64)) -> usize {
    if score < thresholds.0 {
        0
    } else if score < thresholds.1 {
        1
    } else {
        2
    }
}

/// Bands per-patient risk scores of successive (cumulative) stages into
/// low/medium/high by tertiles of the first stage's score distribution,
/// and counts band transitions between consecutive stages.
pub fn stratify_risk(stage_scores: &[(String, Vec<f64>)], labels: &[u8]) -> Result<RiskBandTable> {
    let Some(first) = stage_scores.first() else {
        return Err(Error::invalid("stage_scores", "need at least one stage"));
    };
    let n = labels.len();
    for (stage, scores) in stage_scores {
        if scores.len() != n {
            return Err(Error::LengthMismatch {
                context: format!("risk scores of stage `{stage}` vs labels"),
                expected: n,
                got: scores.len(),
            });
        }
    }
    let third = 1.0 / 3.0;
    let thresholds = (
        quantile(&first.1, third),
        quantile(&first.1, 2.0 * third),
    );

    let bands: Vec<Vec<usize>> = stage_scores
        .iter()
        .map(|(_, scores)| scores.iter().map(|&s| band_of(s, thresholds)).collect())
        .collect();

    let mut counts = Vec::with_capacity(stage_scores.len());
    let mut positive_rate = Vec::with_capacity(stage_scores.len());
    for stage_bands in &bands {
        let mut c = [0usize; 3];
        let mut pos = [0usize; 3];
        for (i, &b) in stage_bands.iter().enumerate() {
            c[b] += 1;
            pos[b] += labels[i] as usize;
        }
        counts.push(c);
        positive_rate.push([0, 1, 2].map(|b| {
            if c[b] == 0 {
                0.0
            } else {
                pos[b] as f64 / c[b] as f64
            }
        }));
    }

    let mut transitions = Vec::new();
    for w in 0..bands.len().saturating_sub(1) {
        let mut t = [[0usize; 3]; 3];
        for i in 0..n {
            t[bands[w][i]][bands[w + 1][i]] += 1;
        }
        transitions.push(Transition {
            from_stage: stage_scores[w].0.clone(),
            to_stage: stage_scores[w + 1].0.clone(),
            counts: t,
        });
    }

    Ok(RiskBandTable {
        stages: stage_scores.iter().map(|(s, _)| s.clone()).collect(),
        thresholds,
        counts,
        positive_rate,
        transitions,
    })
}

/// Retrains on the top-n features by global SHAP importance (original
/// column order preserved) against the same fold partition, for each n.
pub fn minimized_model_study<S, M, F>(
    cohort: &Cohort<S>,
    shap: &ShapMatrix<S>,
    top_n: &[usize],
    folds: &[Vec<usize>],
    trainer: F,
) -> Result<MinimizedTableGeneric<S>>
where
    S: Scalar,
    M: Classifier<S>,
    F: Fn(&Cohort<S>) -> Result<M> + Sync,
{
    let p = cohort.n_features();
    for &n in top_n {
        if n == 0 || n > p {
            return Err(Error::invalid("top_n", format!("n = {n} outside 1..={p}")));
        }
    }
    let ranking = global_importance(shap);
    let index_of: BTreeMap<&str, usize> = cohort
        .feature_names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();

    let full = kfold_cv_with_folds(cohort, folds, &trainer)?;
    let mut rows = Vec::with_capacity(top_n.len());
    for &n in top_n {
        let mut indices: Vec<usize> = ranking[..n]
            .iter()
            .map(|(name, _)| index_of[name.as_str()])
            .collect();
        indices.sort_unstable();
        let sub = cohort.select_features(&indices)?;
        let eval = kfold_cv_with_folds(&sub, folds, &trainer)?;
        rows.push(MinimizedRowGeneric {
            n,
            features: sub.feature_names.clone(),
            eval,
        });
    }
    Ok(MinimizedTableGeneric { rows, full })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizedRowGeneric<S: Scalar> {
    pub n: usize,
    pub features: Vec<String>,
    pub eval: EvalReport<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizedTableGeneric<S: Scalar> {
    pub rows: Vec<MinimizedRowGeneric<S>>,
    pub full: EvalReport<S>,
}

// ---------------------------------------------------------------------
// the run driver
// ---------------------------------------------------------------------

/// Trains the configured model on one cohort.
pub enum TrainedModel {
    Gbm(GbmModel<f64>),
    Logistic(crate::models::LinearModel<f64>),
}

impl TrainedModel {
    fn predict_matrix(&self, features: &ndarray::Array2<f64>) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Gbm(m) => m.predict_proba_matrix(features),
            TrainedModel::Logistic(m) => m.predict_proba_matrix(features),
        }
    }
}

impl Classifier<f64> for TrainedModel {
    fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        match self {
            TrainedModel::Gbm(m) => m.predict_proba(x),
            TrainedModel::Logistic(m) => m.predict_proba(x),
        }
    }

    fn n_features(&self) -> usize {
        match self {
            TrainedModel::Gbm(m) => m.n_features(),
            TrainedModel::Logistic(m) => m.n_features(),
        }
    }
}

struct Emitter {
    out_dir: PathBuf,
    config_hash: String,
    outputs: Vec<OutputFile>,
}

impl Emitter {
    fn new(out_dir: &Path, config_hash: &str) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Emitter {
            out_dir: out_dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            outputs: Vec::new(),
        })
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let bytes = std::fs::read(self.out_dir.join(rel))?;
        self.outputs.push(OutputFile {
            path: rel.to_string(),
            sha256: hex_digest(&bytes),
        });
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn subdir(&self, rel: &str) -> Result<()> {
        std::fs::create_dir_all(self.out_dir.join(rel))?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        io::write_json(
            &self.path(rel),
            &Provenanced {
                config_hash: &self.config_hash,
                data: value,
            },
        )?;
        self.record(rel)
    }

    fn write_svg(&mut self, rel: &str, svg: &str) -> Result<()> {
        std::fs::write(
            self.path(rel),
            format!("<!-- config_hash={} -->\n{svg}", self.config_hash),
        )?;
        self.record(rel)
    }
}

fn trainer_for(
    model: &ModelChoice,
    train: &TrainConfig,
) -> impl Fn(&Cohort<f64>) -> Result<TrainedModel> + Sync {
    let model = model.clone();
    let train = train.clone();
    move |cohort: &Cohort<f64>| match &model {
        ModelChoice::Gbm => Ok(TrainedModel::Gbm(train_gbm(cohort, &train)?)),
        ModelChoice::Logreg { epochs, step, l2 } => Ok(TrainedModel::Logistic(train_logreg(
            cohort, *epochs, *step, *l2,
        )?)),
    }
}

fn fold_fingerprint(folds: &[Vec<usize>]) -> String {
    hex_digest(serde_json::to_string(folds).expect("folds serialize").as_bytes())
}

/// Clusters both spaces, writes the cluster artifacts, and returns the
/// paired correct-rate reports (when ground truth is available) together
/// with the explanation-space assignment of the largest requested cut.
struct ClusterOutcome {
    comparisons: Vec<SpaceComparison<f64>>,
    shap_assignments: BTreeMap<usize, ClusterAssignment>,
}

fn cluster_spaces(
    emitter: &mut Emitter,
    prefix: &str,
    cohort: &Cohort<f64>,
    shap: &ShapMatrix<f64>,
    ks: &[usize],
) -> Result<ClusterOutcome> {
    let raw_scaled = zscore_columns(&cohort.features.view());
    let raw_tree: Dendrogram<f64> = ward_cluster(&raw_scaled.view())?;
    let shap_tree: Dendrogram<f64> = ward_cluster(&shap.values.view())?;
    io::write_dendrogram_csv(
        &emitter.path(&format!("{prefix}dendrogram_raw.csv")),
        &raw_tree,
        Some(&emitter.config_hash),
    )?;
    emitter.record(&format!("{prefix}dendrogram_raw.csv"))?;
    io::write_dendrogram_csv(
        &emitter.path(&format!("{prefix}dendrogram_shap.csv")),
        &shap_tree,
        Some(&emitter.config_hash),
    )?;
    emitter.record(&format!("{prefix}dendrogram_shap.csv"))?;

    let mut comparisons = Vec::new();
    let mut shap_assignments = BTreeMap::new();
    for &k in ks {
        if k > cohort.n_samples() {
            return Err(Error::invalid(
                "cluster_ks",
                format!("k = {k} exceeds the {} rows", cohort.n_samples()),
            ));
        }
        let raw_cut = cut_tree(&raw_tree, k)?;
        let shap_cut = cut_tree(&shap_tree, k)?;
        for (arm, cut) in [("raw", &raw_cut), ("shap", &shap_cut)] {
            let rel = format!("{prefix}assignments_{arm}_k{k}.csv");
            io::write_assignments_csv(&emitter.path(&rel), cut, Some(&emitter.config_hash))?;
            emitter.record(&rel)?;
        }
        if let Some(truth) = &cohort.phenotype {
            comparisons.push(SpaceComparison {
                k,
                raw: correct_rate(&raw_cut, truth)?,
                shap: correct_rate(&shap_cut, truth)?,
            });
        }
        shap_assignments.insert(k, shap_cut);
    }
    Ok(ClusterOutcome {
        comparisons,
        shap_assignments,
    })
}

fn write_embeddings(
    emitter: &mut Emitter,
    prefix: &str,
    settings: &EmbedSettings,
    cohort: &Cohort<f64>,
    shap: &ShapMatrix<f64>,
    cluster_tags: Option<&ClusterAssignment>,
    master_seed: u64,
) -> Result<()> {
    if !settings.enabled {
        return Ok(());
    }
    let raw_scaled = zscore_columns(&cohort.features.view());
    let arms: [(&str, ndarray::ArrayView2<f64>); 2] =
        [("raw", raw_scaled.view()), ("shap", shap.values.view())];
    for (arm, points) in arms {
        let mut embeddings: Vec<(String, Embedding2D<f64>)> = Vec::new();
        if settings.pca {
            embeddings.push((format!("{arm}_pca"), pca_project(&points, 2)?));
        }
        if settings.tsne {
            let config = TsneConfig {
                perplexity: settings.perplexity,
                iterations: settings.iterations,
                seed: derive_seed(master_seed, &format!("tsne-{prefix}{arm}")),
                ..TsneConfig::default()
            };
            embeddings.push((format!("{arm}_tsne"), tsne_with_config(&points, &config)?));
        }
        for (name, embedding) in embeddings {
            let rel_csv = format!("{prefix}embedding_{name}.csv");
            io::write_embedding_csv(
                &emitter.path(&rel_csv),
                &embedding,
                cluster_tags.map(|c| c.labels.as_slice()),
                cohort.phenotype.as_deref(),
                Some(&emitter.config_hash),
            )?;
            emitter.record(&rel_csv)?;

            let categories: Option<Vec<String>> = cohort
                .phenotype
                .clone()
                .or_else(|| cluster_tags.map(|c| c.labels.iter().map(|l| format!("cluster {l}")).collect()));
            let svg = scatter_svg(&embedding.coords.view(), categories.as_deref(), &format!("{prefix}{name}"));
            emitter.write_svg(&format!("{prefix}embedding_{name}.svg"), &svg)?;
        }
    }
    Ok(())
}

/// Per-phenotype importance rankings over the case phenotypes (groups
/// whose members all carry label 1).
fn per_phenotype_importance(
    cohort: &Cohort<f64>,
    shap: &ShapMatrix<f64>,
) -> BTreeMap<String, Vec<(String, f64)>> {
    let mut out = BTreeMap::new();
    let Some(truth) = &cohort.phenotype else {
        return out;
    };
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, name) in truth.iter().enumerate() {
        groups.entry(name.as_str()).or_default().push(i);
    }
    for (name, rows) in groups {
        if rows.iter().all(|&i| cohort.labels[i] == 1) {
            out.insert(name.to_string(), importance_for_rows(shap, &rows));
        }
    }
    out
}

/// Synthetic-study driver: generate, cross-validate, refit, explain,
/// cluster both spaces, embed, and (for tree models) run the minimized
/// study. Artifacts land in `config.out_dir` and `report.json` indexes
/// them.
pub fn run_synthetic_study(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let DatasetSource::Synthetic(synth) = &config.dataset else {
        return Err(Error::invalid("dataset", "run_synthetic_study requires a synthetic source"));
    };
    let config_hash = config.config_hash();
    let mut emitter = Emitter::new(&config.out_dir, &config_hash)?;

    let cohort = generate_cohort(synth).map_err(|e| Error::in_stage("generate", e))?;
    io::write_cohort_csv(&emitter.path("cohort.csv"), &cohort, Some(&config_hash))?;
    emitter.record("cohort.csv")?;

    let mut train_config = config.train.clone();
    train_config.seed = derive_seed(config.seed, "train") ^ config.train.seed;
    let trainer = trainer_for(&config.model, &train_config);

    let folds = stratified_folds(&cohort.labels, config.cv_folds, derive_seed(config.seed, "folds"))
        .map_err(|e| Error::in_stage("cv", e))?;
    let eval =
        kfold_cv_with_folds(&cohort, &folds, &trainer).map_err(|e| Error::in_stage("cv", e))?;

    let full_model = trainer(&cohort).map_err(|e| Error::in_stage("train", e))?;
    if let TrainedModel::Gbm(model) = &full_model {
        io::save_model(&emitter.path("model.json"), &io::ModelDocument::Gbm(model.clone()))?;
    } else if let TrainedModel::Logistic(model) = &full_model {
        io::save_model(
            &emitter.path("model.json"),
            &io::ModelDocument::Logistic(model.clone()),
        )?;
    }
    emitter.record("model.json")?;

    let mut comparisons = Vec::new();
    let mut importance = Vec::new();
    let mut per_phenotype = BTreeMap::new();
    let mut minimized = None;

    if let TrainedModel::Gbm(model) = &full_model {
        let shap = build_shap_matrix(model, &cohort).map_err(|e| Error::in_stage("explain", e))?;
        if config.shap.export_matrix {
            io::write_shap_csv(&emitter.path("shap.csv"), &shap, Some(&config_hash))?;
            emitter.record("shap.csv")?;
        }
        importance = global_importance(&shap);
        emitter.write_json("importance.json", &importance)?;
        if config.shap.per_phenotype {
            per_phenotype = per_phenotype_importance(&cohort, &shap);
            emitter.write_json("importance_per_phenotype.json", &per_phenotype)?;
        }

        let outcome = cluster_spaces(&mut emitter, "", &cohort, &shap, &config.cluster_ks)
            .map_err(|e| Error::in_stage("cluster", e))?;
        comparisons = outcome.comparisons;
        emitter.write_json("correct_rates.json", &comparisons)?;

        let tag_cut = config
            .cluster_ks
            .iter()
            .max()
            .and_then(|k| outcome.shap_assignments.get(k));
        write_embeddings(
            &mut emitter,
            "",
            &config.embedding,
            &cohort,
            &shap,
            tag_cut,
            config.seed,
        )
        .map_err(|e| Error::in_stage("embed", e))?;

        if !config.top_n.is_empty() {
            let table = minimized_model_study(&cohort, &shap, &config.top_n, &folds, &trainer)
                .map_err(|e| Error::in_stage("minimize", e))?;
            let table = MinimizedTable {
                rows: table
                    .rows
                    .into_iter()
                    .map(|r| MinimizedRow {
                        n: r.n,
                        features: r.features,
                        eval: r.eval,
                    })
                    .collect(),
                full: table.full,
            };
            emitter.write_json("minimized.json", &table)?;
            minimized = Some(table);
        }
    }

    let mut normalized_config = config.clone();
    normalized_config.out_dir = PathBuf::new();
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash,
        seed: config.seed,
        config: normalized_config,
        fold_fingerprint: fold_fingerprint(&folds),
        stages: vec![StageReport {
            stage: "flat".to_string(),
            n_rows: cohort.n_samples(),
            n_features: cohort.n_features(),
            eval,
        }],
        skipped_stages: Vec::new(),
        comparisons,
        importance,
        per_phenotype_importance: per_phenotype,
        risk_bands: None,
        minimized,
        outputs: emitter.outputs.clone(),
    };
    io::write_json(&emitter.path("report.json"), &report)?;
    Ok(report)
}

/// Appendix-style preprocessing: pooled IQR outlier removal per variable,
/// >20% missing-variable exclusion, LOCF with cohort-mean fallback.
pub fn preprocess_trajectories(
    cohort: &TrajectoryCohort<f64>,
    iqr_multiplier: f64,
    missing_threshold: f64,
) -> Result<TrajectoryCohort<f64>> {
    let mut cleaned = cohort.clone();
    for v in 0..cleaned.n_variables() {
        let pooled: Vec<f64> = cleaned
            .patients
            .iter()
            .flat_map(|p| p.series[v].iter().filter_map(|&(_, value)| value))
            .collect();
        if pooled.is_empty() {
            continue;
        }
        let kept = clean_outliers(&pooled, iqr_multiplier);
        if kept.is_empty() {
            continue;
        }
        let lo = kept.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for patient in &mut cleaned.patients {
            patient.series[v].retain(|&(_, value)| match value {
                Some(x) => (lo..=hi).contains(&x),
                None => true,
            });
        }
    }

    let cleaned = crate::temporal::drop_sparse_variables(&cleaned, missing_threshold)?;

    let mut imputed = cleaned.clone();
    for v in 0..imputed.n_variables() {
        let observed: Vec<f64> = imputed
            .patients
            .iter()
            .flat_map(|p| p.series[v].iter().filter_map(|&(_, value)| value))
            .collect();
        let fallback = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for patient in &mut imputed.patients {
            patient.series[v] = impute_locf(&patient.series[v], fallback)
                .into_iter()
                .map(|(t, x)| (t, Some(x)))
                .collect();
        }
    }
    Ok(imputed)
}

/// Stage-wise study over an ingested longitudinal cohort: per requested
/// stage builds the design matrix, cross-validates, explains, clusters;
/// then stratifies risk over the cumulative stages and runs the minimized
/// study on the last requested stage.
pub fn run_stagewise_study(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let DatasetSource::Csv {
        trajectories,
        boundaries,
        outcomes,
        statics,
    } = &config.dataset
    else {
        return Err(Error::invalid("dataset", "run_stagewise_study requires a csv source"));
    };
    let config_hash = config.config_hash();
    let mut emitter = Emitter::new(&config.out_dir, &config_hash)?;

    let paths = io::TrajectoryPaths {
        trajectories: trajectories.clone(),
        boundaries: boundaries.clone(),
        outcomes: outcomes.clone(),
    };
    let raw = io::read_trajectories::<f64>(&paths).map_err(|e| Error::in_stage("ingest", e))?;
    let statics: Option<StaticFeatures<f64>> = statics
        .as_ref()
        .map(|p| {
            let ids: Vec<String> = raw.patients.iter().map(|p| p.patient_id.clone()).collect();
            io::read_statics_csv(p, &ids)
        })
        .transpose()
        .map_err(|e| Error::in_stage("ingest", e))?;
    let prepared =
        preprocess_trajectories(&raw, 1.5, 0.20).map_err(|e| Error::in_stage("preprocess", e))?;

    let mut train_config = config.train.clone();
    train_config.seed = derive_seed(config.seed, "train") ^ config.train.seed;
    let trainer = trainer_for(&config.model, &train_config);

    let mut stage_reports = Vec::new();
    let mut skipped = Vec::new();
    let mut folds_shared: Option<Vec<Vec<usize>>> = None;
    let mut cumulative_scores: Vec<(String, Vec<f64>)> = Vec::new();
    let mut labels_shared: Option<Vec<u8>> = None;
    let mut last_stage_data: Option<(Cohort<f64>, ShapMatrix<f64>)> = None;
    let mut comparisons = Vec::new();
    let mut importance = Vec::new();

    for selector in &config.stages {
        let label = selector.label();
        let mut design = build_design_matrix(&prepared, selector.stage, selector.cumulative, statics.as_ref())
            .map_err(|e| Error::in_stage(&label, e))?;
        let observations: f64 = prepared
            .patients
            .iter()
            .map(|p| {
                crate::temporal::slice_stage(p, selector.stage, selector.cumulative)
                    .iter()
                    .map(|s| s.len() as f64)
                    .sum::<f64>()
            })
            .sum();
        if observations == 0.0 && statics.is_none() {
            skipped.push(SkippedStage {
                stage: label.clone(),
                reason: "no observations in the stage window".to_string(),
            });
            continue;
        }
        design.mean_impute();

        emitter.subdir("stages")?;
        let rel = format!("stages/design_{label}.csv");
        io::write_cohort_csv(&emitter.path(&rel), &design, Some(&config_hash))?;
        emitter.record(&rel)?;

        let folds = match &folds_shared {
            Some(f) => f.clone(),
            None => {
                let f = stratified_folds(
                    &design.labels,
                    config.cv_folds,
                    derive_seed(config.seed, "folds"),
                )
                .map_err(|e| Error::in_stage(&label, e))?;
                folds_shared = Some(f.clone());
                f
            }
        };
        labels_shared.get_or_insert_with(|| design.labels.clone());

        let eval = kfold_cv_with_folds(&design, &folds, &trainer)
            .map_err(|e| Error::in_stage(&label, e))?;
        stage_reports.push(StageReport {
            stage: label.clone(),
            n_rows: design.n_samples(),
            n_features: design.n_features(),
            eval,
        });

        let full_model = trainer(&design).map_err(|e| Error::in_stage(&label, e))?;
        if selector.cumulative {
            let scores = full_model
                .predict_matrix(&design.features)
                .map_err(|e| Error::in_stage(&label, e))?;
            cumulative_scores.push((label.clone(), scores));
        }

        if let TrainedModel::Gbm(model) = &full_model {
            let shap =
                build_shap_matrix(model, &design).map_err(|e| Error::in_stage(&label, e))?;
            if config.shap.export_matrix {
                let rel = format!("stages/shap_{label}.csv");
                io::write_shap_csv(&emitter.path(&rel), &shap, Some(&config_hash))?;
                emitter.record(&rel)?;
            }
            let stage_importance = global_importance(&shap);
            emitter.write_json(&format!("stages/importance_{label}.json"), &stage_importance)?;

            let outcome = cluster_spaces(
                &mut emitter,
                &format!("stages/{label}_"),
                &design,
                &shap,
                &config.cluster_ks,
            )
            .map_err(|e| Error::in_stage(&label, e))?;
            comparisons.extend(outcome.comparisons);

            let tag_cut = config
                .cluster_ks
                .iter()
                .max()
                .and_then(|k| outcome.shap_assignments.get(k).cloned());
            write_embeddings(
                &mut emitter,
                &format!("stages/{label}_"),
                &config.embedding,
                &design,
                &shap,
                tag_cut.as_ref(),
                config.seed,
            )
            .map_err(|e| Error::in_stage(&label, e))?;

            importance = stage_importance;
            last_stage_data = Some((design, shap));
        }
    }

    // Risk stratification over the cumulative stages, in pre/intra/post order.
    let mut risk_bands = None;
    if !cumulative_scores.is_empty() {
        let order = ["pre+", "intra+", "post+"];
        cumulative_scores.sort_by_key(|(label, _)| {
            order.iter().position(|o| o == label).unwrap_or(usize::MAX)
        });
        let labels = labels_shared.as_ref().expect("stage ran");
        let table = stratify_risk(&cumulative_scores, labels)
            .map_err(|e| Error::in_stage("stratify", e))?;
        emitter.write_json("risk_bands.json", &table)?;
        risk_bands = Some(table);
    }

    let mut minimized = None;
    if let (Some((design, shap)), Some(folds), false) =
        (&last_stage_data, &folds_shared, config.top_n.is_empty())
    {
        let feasible: Vec<usize> = config
            .top_n
            .iter()
            .copied()
            .filter(|&n| n <= design.n_features())
            .collect();
        if !feasible.is_empty() {
            let table = minimized_model_study(design, shap, &feasible, folds, &trainer)
                .map_err(|e| Error::in_stage("minimize", e))?;
            let table = MinimizedTable {
                rows: table
                    .rows
                    .into_iter()
                    .map(|r| MinimizedRow {
                        n: r.n,
                        features: r.features,
                        eval: r.eval,
                    })
                    .collect(),
                full: table.full,
            };
            emitter.write_json("minimized.json", &table)?;
            minimized = Some(table);
        }
    }

    let mut normalized_config = config.clone();
    normalized_config.out_dir = PathBuf::new();
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash,
        seed: config.seed,
        config: normalized_config,
        fold_fingerprint: folds_shared.as_deref().map(fold_fingerprint).unwrap_or_default(),
        stages: stage_reports,
        skipped_stages: skipped,
        comparisons,
        importance,
        per_phenotype_importance: BTreeMap::new(),
        risk_bands,
        minimized,
        outputs: emitter.outputs.clone(),
    };
    io::write_json(&emitter.path("report.json"), &report)?;
    Ok(report)
}

/// Dispatches on the dataset source.
pub fn run_all(config: &RunConfig) -> Result<RunReport> {
    match &config.dataset {
        DatasetSource::Synthetic(_) => run_synthetic_study(config),
        DatasetSource::Csv { .. } => run_stagewise_study(config),
    }
}

/// Verification outcome of one emitted artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedFile {
    pub path: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config_hash_ok: bool,
    pub files: Vec<VerifiedFile>,
}

impl VerifyReport {
    pub fn all_ok(&self) -> bool {
        self.config_hash_ok && self.files.iter().all(|f| f.ok)
    }
}

/// Recomputes the config hash embedded in `report.json` and the SHA-256
/// of every indexed artifact.
pub fn verify_outputs(out_dir: &Path) -> Result<VerifyReport> {
    let report: RunReport = io::read_json(&out_dir.join("report.json"))?;
    let config_hash_ok = report.config.config_hash() == report.config_hash;
    let files = report
        .outputs
        .iter()
        .map(|out| {
            let ok = std::fs::read(out_dir.join(&out.path))
                .map(|bytes| hex_digest(&bytes) == out.sha256)
                .unwrap_or(false);
            VerifiedFile {
                path: out.path.clone(),
                ok,
            }
        })
        .collect();
    Ok(VerifyReport {
        config_hash_ok,
        files,
    })
}
