//! Command orchestration: each `cmd_*` reads its inputs, runs one pipeline
//! stage and writes its outputs atomically. `cmd_pipeline` chains graph
//! construction, training, prediction and evaluation for one target.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectome::{group_average, joint_pca, pearson_fc, FcMatrix, FeatureMatrix, JointPca, TimeSeriesMatrix};
use crate::error::{GdaipError, Result};
use crate::formats::*;
use crate::gat::{predict_parcellation, BrainGraph, ModelParams};
use crate::mesh_graph::{build_adjacency, core_region, AdjacencyMatrix, Parcellation};
use crate::metrics::{consistency, dice, homogeneity, ConsistencyReport, HomogeneityResult, SessionKey};
use crate::synth::{generate_corpus, CorpusSeeds, SynthCorpus, SynthSpec, SynthSubject};
use crate::trainer::{train, DomainBatch, TrainConfig, TrainHistory};

pub const DEFAULT_PCA_DIM: usize = 50;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const GRAPH_FILE: &str = "graph.txt";
pub const SOURCE_FC_FILE: &str = "source_fc.mat";
pub const TARGET_FC_FILE: &str = "target_fc.mat";
pub const SOURCE_FEATURES_FILE: &str = "source_features.mat";
pub const TARGET_FEATURES_FILE: &str = "target_features.mat";
pub const CHECKPOINT_FILE: &str = "model.gdpc";
pub const HISTORY_FILE: &str = "history.csv";
pub const LABELS_FILE: &str = "labels.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
    Single,
}

impl std::str::FromStr for Hemisphere {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "left" => Ok(Hemisphere::Left),
            "right" => Ok(Hemisphere::Right),
            "single" => Ok(Hemisphere::Single),
            _ => Err(format!("hemisphere must be left, right or single, got {s:?}")),
        }
    }
}

/// Everything one `pipeline` run needs. Read from a key=value file whose
/// relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mesh: PathBuf,
    /// Reference atlas labels for the source graph.
    pub atlas: PathBuf,
    pub source_series: Vec<PathBuf>,
    pub target_series: PathBuf,
    pub output: PathBuf,
    /// Optional ground truth scored with Dice.
    pub truth: Option<PathBuf>,
    /// Defaults to `max(label) + 1`.
    pub n_roi: Option<usize>,
    pub pca_dim: usize,
    pub hemisphere: Hemisphere,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let resolve = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let perr = |line: usize, msg: String| GdaipError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut mesh = None;
        let mut atlas = None;
        let mut source_series = None;
        let mut target_series = None;
        let mut output = None;
        let mut truth = None;
        let mut n_roi = None;
        let mut pca_dim = DEFAULT_PCA_DIM;
        let mut hemisphere = Hemisphere::Single;
        let mut train = TrainConfig::default();
        for (line, key, value) in parse_key_values(path, text)? {
            match key.as_str() {
                "mesh" => mesh = Some(resolve(&value)),
                "atlas" => atlas = Some(resolve(&value)),
                "source_series" => {
                    let list: Vec<PathBuf> = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(resolve)
                        .collect();
                    if list.is_empty() {
                        return Err(perr(line, "source_series is empty".into()));
                    }
                    source_series = Some(list);
                }
                "target_series" => target_series = Some(resolve(&value)),
                "output" => output = Some(resolve(&value)),
                "truth" => truth = Some(resolve(&value)),
                "n_roi" => n_roi = Some(value.parse().map_err(|_| perr(line, format!("invalid n_roi {value:?}")))?),
                "pca_dim" => pca_dim = value.parse().map_err(|_| perr(line, format!("invalid pca_dim {value:?}")))?,
                "hemisphere" => hemisphere = value.parse().map_err(|m| perr(line, m))?,
                _ => match apply_train_key(&mut train, &key, &value) {
                    Ok(true) => {}
                    Ok(false) => return Err(perr(line, format!("unknown key {key:?}"))),
                    Err(m) => return Err(perr(line, m)),
                },
            }
        }
        let missing = |k: &str| GdaipError::Config(format!("{}: missing required key {k:?}", path.display()));
        Ok(PipelineConfig {
            mesh: mesh.ok_or_else(|| missing("mesh"))?,
            atlas: atlas.ok_or_else(|| missing("atlas"))?,
            source_series: source_series.ok_or_else(|| missing("source_series"))?,
            target_series: target_series.ok_or_else(|| missing("target_series"))?,
            output: output.ok_or_else(|| missing("output"))?,
            truth,
            n_roi,
            pca_dim,
            hemisphere,
            train,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GdaipError::io(path, e))?;
        Self::parse(path, &text)
    }

    /// Every input must exist before any work starts.
    pub fn check_inputs(&self) -> Result<()> {
        require_file(&self.mesh, "mesh")?;
        require_file(&self.atlas, "atlas labels")?;
        for p in &self.source_series {
            require_file(p, "source time series")?;
        }
        require_file(&self.target_series, "target time series")?;
        if let Some(t) = &self.truth {
            require_file(t, "ground-truth labels")?;
        }
        if self.pca_dim == 0 {
            return Err(GdaipError::Config("pca_dim must be positive".into()));
        }
        self.train.validate()
    }
}

/// Replay record written at the end of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// File name (relative to the output directory) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    /// Stage name to seconds.
    pub timings: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub results: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            tool: "gdaip".into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config: serde_json::to_value(config).map_err(|e| GdaipError::Input(e.to_string()))?,
            seeds: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            results: BTreeMap::new(),
        })
    }

    /// Records the checksum of `dir/name`.
    pub fn add_artifact(&mut self, dir: &Path, name: &str) -> Result<()> {
        let sum = sha256_file(&dir.join(name))?;
        self.artifacts.insert(name.to_string(), sum);
        Ok(())
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub per_roi: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub degenerate: bool,
}

impl From<ConsistencyReport> for ConsistencySummary {
    fn from(r: ConsistencyReport) -> Self {
        ConsistencySummary {
            intra: r.intra,
            inter: r.inter,
            intra_mean: r.intra_mean,
            inter_mean: r.inter_mean,
            t: r.t,
            p: r.p,
            degenerate: r.degenerate,
        }
    }
}

/// Output of `evaluate`; sections that were not requested are `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: Option<DiceSummary>,
    pub consistency: Option<ConsistencySummary>,
    pub homogeneity: Option<HomogeneityResult>,
}

fn opt_csv(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => String::new(),
    }
}

impl MetricsReport {
    /// Flat `metric,key,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,key,value\n");
        if let Some(d) = &self.dice {
            for (r, v) in d.per_roi.iter().enumerate() {
                out.push_str(&format!("dice,{r},{}\n", opt_csv(*v)));
            }
            out.push_str(&format!("dice,mean,{}\n", opt_csv(Some(d.mean))));
        }
        if let Some(c) = &self.consistency {
            for (i, v) in c.intra.iter().enumerate() {
                out.push_str(&format!("consistency_intra,{i},{v}\n"));
            }
            for (i, v) in c.inter.iter().enumerate() {
                out.push_str(&format!("consistency_inter,{i},{v}\n"));
            }
            out.push_str(&format!("consistency,intra_mean,{}\n", opt_csv(Some(c.intra_mean))));
            out.push_str(&format!("consistency,inter_mean,{}\n", opt_csv(Some(c.inter_mean))));
            out.push_str(&format!("consistency,t,{}\n", opt_csv(c.t)));
            out.push_str(&format!("consistency,p,{}\n", opt_csv(c.p)));
        }
        if let Some(h) = &self.homogeneity {
            for (r, v) in h.per_roi.iter().enumerate() {
                out.push_str(&format!("homogeneity,{r},{}\n", opt_csv(*v)));
            }
            out.push_str(&format!("homogeneity,mean,{}\n", opt_csv(Some(h.mean))));
        }
        out
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        write_json(json, self)?;
        atomic_write(csv, self.to_csv().as_bytes())
    }
}

/// Whether the target graph contributes labels and entropy to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adaptation {
    /// Target core labels plus the routed entropy term.
    Full,
    /// Source labels only, `λ = 0`.
    SourceOnly,
}

#[derive(Debug, Clone)]
pub struct IndividualRun {
    pub pca: JointPca,
    pub params: ModelParams,
    pub history: TrainHistory,
    pub parcellation: Parcellation,
}

/// Joint PCA of the two fingerprints, training, and prediction on the
/// target graph. The target core comes from the reference atlas.
pub fn parcellate_individual(
    adjacency: &AdjacencyMatrix,
    atlas: &Parcellation,
    source_fc: &FcMatrix,
    target_fc: &FcMatrix,
    pca_dim: usize,
    config: &TrainConfig,
    adaptation: Adaptation,
) -> Result<IndividualRun> {
    let pca = joint_pca(source_fc, target_fc, pca_dim)?;
    let source = BrainGraph::new(adjacency.clone(), pca.source.clone())?;
    let target = BrainGraph::new(adjacency.clone(), pca.target.clone())?;
    let (batch, config) = match adaptation {
        Adaptation::Full => {
            let core = core_region(adjacency, atlas, config.core_fraction)?;
            (DomainBatch::new(source, atlas.clone(), target, &core)?, *config)
        }
        Adaptation::SourceOnly => (
            DomainBatch::source_only(source, atlas.clone(), target)?,
            TrainConfig {
                lambda_mme: 0.0,
                ..*config
            },
        ),
    };
    let (params, history) = train(&batch, &config)?;
    let parcellation = predict_parcellation(&batch.target, &params)?;
    Ok(IndividualRun {
        pca,
        params,
        history,
        parcellation,
    })
}

/// Group fingerprint: element-wise mean of per-subject Pearson FC.
pub fn group_fc(series: &[TimeSeriesMatrix]) -> Result<FcMatrix> {
    let fcs = series.par_iter().map(pearson_fc).collect::<Result<Vec<_>>>()?;
    group_average(&fcs)
}

fn check_vertex_count(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(GdaipError::Config(format!(
            "{what} covers {got} vertices, the mesh has {expected}"
        )));
    }
    Ok(())
}

fn read_series_list(paths: &[PathBuf], vertices: usize) -> Result<Vec<TimeSeriesMatrix>> {
    paths
        .iter()
        .map(|p| {
            let ts = read_time_series(p)?;
            check_vertex_count(&p.display().to_string(), ts.vertex_count(), vertices)?;
            Ok(ts)
        })
        .collect()
}

/// Writes the corpus layout:
/// `mesh.txt`, `reference_labels.txt`, `source/srcNN.tsf`,
/// `subjects/subNN/planted_labels.txt`, `subjects/subNN/sesK.tsf`,
/// and `manifest.json`.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<SynthCorpus> {
    let start = Instant::now();
    let corpus = generate_corpus(spec)?;
    let mut manifest = RunManifest::new("synth", spec)?;
    manifest.timings.insert("generate".into(), start.elapsed().as_secs_f64());
    let seeds = CorpusSeeds::derive(spec);
    manifest.seeds.insert("root".into(), seeds.root);
    manifest.seeds.insert("reference".into(), seeds.reference);
    for (i, s) in seeds.source.iter().enumerate() {
        manifest.seeds.insert(format!("source/{i}"), *s);
    }
    for (s, subject) in corpus.subjects.iter().enumerate() {
        manifest.seeds.insert(format!("{}/atlas", subject.id), seeds.subject_atlas[s]);
        for k in 0..spec.sessions {
            let ses = SynthSubject::session_id(k);
            manifest.seeds.insert(format!("{}/{ses}/bold", subject.id), seeds.session_bold[s][k]);
            manifest.seeds.insert(format!("{}/{ses}/shift", subject.id), seeds.session_shift[s][k]);
        }
    }

    let mut names = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        atomic_write(&out.join(&name), &bytes)?;
        names.push(name);
        Ok(())
    };
    put("mesh.txt".into(), mesh_to_string(&corpus.mesh).into_bytes())?;
    put("reference_labels.txt".into(), labels_to_string(corpus.reference.labels()).into_bytes())?;
    for (i, ts) in corpus.source_series.iter().enumerate() {
        put(format!("source/src{:02}.tsf", i + 1), time_series_bytes(ts)?)?;
    }
    for subject in &corpus.subjects {
        put(
            format!("subjects/{}/planted_labels.txt", subject.id),
            labels_to_string(subject.planted.labels()).into_bytes(),
        )?;
        for (k, ts) in subject.sessions.iter().enumerate() {
            put(
                format!("subjects/{}/{}.tsf", subject.id, SynthSubject::session_id(k)),
                time_series_bytes(ts)?,
            )?;
        }
    }
    for name in &names {
        manifest.add_artifact(out, name)?;
    }
    manifest.results.insert("planted_difficulty".into(), corpus.planted_difficulty);
    manifest.write(out)?;
    Ok(corpus)
}

/// `fingerprint`: Pearson FC of one series, or the group mean of several.
pub fn cmd_fingerprint(series: &[PathBuf], out: &Path) -> Result<FcMatrix> {
    if series.is_empty() {
        return Err(GdaipError::Input("fingerprint needs at least one time series".into()));
    }
    let first = read_time_series(&series[0])?;
    let n = first.vertex_count();
    let mut all = vec![first];
    all.extend(read_series_list(&series[1..], n)?);
    let fc = group_fc(&all)?;
    write_matrix(out, fc.values())?;
    Ok(fc)
}

#[derive(Debug, Clone)]
pub struct GraphArtifacts {
    pub adjacency: AdjacencyMatrix,
    pub source_fc: FcMatrix,
    pub target_fc: FcMatrix,
    pub pca: JointPca,
}

/// `graph`: adjacency, group and individual FC, and joint-PCA features.
pub fn cmd_graph_build(
    mesh: &Path,
    source_series: &[PathBuf],
    target_series: &Path,
    pca_dim: usize,
    out: &Path,
) -> Result<GraphArtifacts> {
    require_file(mesh, "mesh")?;
    for p in source_series {
        require_file(p, "source time series")?;
    }
    require_file(target_series, "target time series")?;
    if source_series.is_empty() {
        return Err(GdaipError::Input("graph needs at least one source time series".into()));
    }
    let mesh = read_mesh(mesh)?;
    let adjacency = build_adjacency(&mesh);
    let n = mesh.vertex_count();
    let source = read_series_list(source_series, n)?;
    let target = read_series_list(&[target_series.to_path_buf()], n)?.remove(0);
    let source_fc = group_fc(&source)?;
    let target_fc = pearson_fc(&target)?;
    let pca = joint_pca(&source_fc, &target_fc, pca_dim)?;
    write_graph(&out.join(GRAPH_FILE), &adjacency)?;
    write_matrix(&out.join(SOURCE_FC_FILE), source_fc.values())?;
    write_matrix(&out.join(TARGET_FC_FILE), target_fc.values())?;
    write_matrix(&out.join(SOURCE_FEATURES_FILE), pca.source.values())?;
    write_matrix(&out.join(TARGET_FEATURES_FILE), pca.target.values())?;
    Ok(GraphArtifacts {
        adjacency,
        source_fc,
        target_fc,
        pca,
    })
}

/// Loads the adjacency and both feature matrices written by `graph`.
pub fn load_graph_dir(dir: &Path) -> Result<(BrainGraph, BrainGraph)> {
    let graph_path = require_file(&dir.join(GRAPH_FILE), "graph")?;
    let src_path = require_file(&dir.join(SOURCE_FEATURES_FILE), "source features")?;
    let tgt_path = require_file(&dir.join(TARGET_FEATURES_FILE), "target features")?;
    let adjacency = read_graph(&graph_path)?;
    let source = FeatureMatrix::new(read_matrix(&src_path)?)?;
    let target = FeatureMatrix::new(read_matrix(&tgt_path)?)?;
    if source.dim() != target.dim() {
        return Err(GdaipError::Config(format!(
            "source features have width {}, target features {}",
            source.dim(),
            target.dim()
        )));
    }
    Ok((
        BrainGraph::new(adjacency.clone(), source)?,
        BrainGraph::new(adjacency, target)?,
    ))
}

/// `train`: trains on a graph directory; writes checkpoint, history and
/// manifest into `out`. All inputs are checked before the first step.
pub fn cmd_train(
    graph_dir: &Path,
    atlas: &Path,
    n_roi: Option<usize>,
    config: &TrainConfig,
    adaptation: Adaptation,
    out: &Path,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let (source, target) = load_graph_dir(graph_dir)?;
    let atlas = read_labels(&require_file(atlas, "atlas labels")?, n_roi)?;
    check_vertex_count("atlas", atlas.len(), source.vertex_count())?;
    let mut manifest = RunManifest::new("train", config)?;
    manifest.seeds.insert("root".into(), config.seed);
    let (batch, effective) = match adaptation {
        Adaptation::Full => {
            let core = core_region(source.adjacency(), &atlas, config.core_fraction)?;
            (DomainBatch::new(source, atlas, target, &core)?, *config)
        }
        Adaptation::SourceOnly => (
            DomainBatch::source_only(source, atlas, target)?,
            TrainConfig {
                lambda_mme: 0.0,
                ..*config
            },
        ),
    };
    let (params, history) = manifest.time("train", || train(&batch, &effective))?;
    write_checkpoint(&out.join(CHECKPOINT_FILE), &params)?;
    write_history(&out.join(HISTORY_FILE), &history)?;
    manifest.add_artifact(out, CHECKPOINT_FILE)?;
    manifest.add_artifact(out, HISTORY_FILE)?;
    manifest.write(out)?;
    Ok((params, history))
}

/// `predict`: labels the graph's target features (or source with `use_source`).
pub fn cmd_predict(graph_dir: &Path, checkpoint: &Path, use_source: bool, out: &Path) -> Result<Parcellation> {
    let params = read_checkpoint(&require_file(checkpoint, "checkpoint")?)?;
    let (source, target) = load_graph_dir(graph_dir)?;
    let graph = if use_source { source } else { target };
    if graph.features().dim() != params.dims.in_dim {
        return Err(GdaipError::Config(format!(
            "checkpoint expects {} input features, graph has {}",
            params.dims.in_dim,
            graph.features().dim()
        )));
    }
    let parcellation = predict_parcellation(&graph, &params)?;
    write_labels(out, &parcellation)?;
    Ok(parcellation)
}

/// Inputs of `evaluate`; each supplied piece enables one report section.
#[derive(Debug, Clone, Default)]
pub struct EvaluateInputs {
    pub labels: Option<PathBuf>,
    /// Dice of `labels` against this.
    pub truth: Option<PathBuf>,
    /// Homogeneity of `labels` on this series.
    pub series: Option<PathBuf>,
    /// `(subject, session, labels path)` for the consistency test.
    pub sessions: Vec<(String, String, PathBuf)>,
    pub n_roi: Option<usize>,
}

pub fn cmd_evaluate(inputs: &EvaluateInputs, json_out: &Path, csv_out: &Path) -> Result<MetricsReport> {
    let labels = inputs
        .labels
        .as_deref()
        .map(|p| read_labels(&require_file(p, "labels")?, inputs.n_roi))
        .transpose()?;
    let mut report = MetricsReport::default();
    if let Some(truth) = &inputs.truth {
        let a = labels
            .as_ref()
            .ok_or_else(|| GdaipError::Input("Dice needs --labels".into()))?;
        let b = read_labels(&require_file(truth, "truth labels")?, Some(a.n_roi()))?;
        let d = dice(a, &b)?;
        report.dice = Some(DiceSummary {
            per_roi: d.per_roi,
            mean: d.mean,
        });
    }
    if let Some(series) = &inputs.series {
        let a = labels
            .as_ref()
            .ok_or_else(|| GdaipError::Input("homogeneity needs --labels".into()))?;
        let ts = read_time_series(&require_file(series, "time series")?)?;
        report.homogeneity = Some(homogeneity(a, &ts)?);
    }
    if !inputs.sessions.is_empty() {
        let mut map = BTreeMap::new();
        for (subject, session, path) in &inputs.sessions {
            let p = read_labels(&require_file(path, "session labels")?, inputs.n_roi)?;
            map.insert(SessionKey::new(subject, session), p);
        }
        report.consistency = Some(consistency(&map)?.into());
    }
    report.write(json_out, csv_out)?;
    Ok(report)
}

/// `merge`: concatenates left then right labels; right labels are offset
/// by `n_roi_left`.
pub fn merge_hemispheres(left: &Parcellation, right: &Parcellation) -> Result<Parcellation> {
    let offset = left.n_roi();
    let mut labels = left.labels().to_vec();
    labels.extend(right.labels().iter().map(|l| l + offset));
    Parcellation::new(labels, offset + right.n_roi())
}

pub fn cmd_merge(
    left: &Path,
    right: &Path,
    n_roi_left: Option<usize>,
    n_roi_right: Option<usize>,
    out: &Path,
) -> Result<Parcellation> {
    let l = read_labels(&require_file(left, "left labels")?, n_roi_left)?;
    let r = read_labels(&require_file(right, "right labels")?, n_roi_right)?;
    let merged = merge_hemispheres(&l, &r)?;
    write_labels(out, &merged)?;
    Ok(merged)
}

/// `pipeline`: graph, train, predict and evaluate for one target.
/// Everything lands in `config.output`; the manifest is written last.
pub fn cmd_pipeline(config: &PipelineConfig) -> Result<MetricsReport> {
    config.check_inputs()?;
    let out = &config.output;
    let mut manifest = RunManifest::new("pipeline", config)?;
    manifest.seeds.insert("root".into(), config.train.seed);

    let graph = manifest.time("graph", || {
        cmd_graph_build(&config.mesh, &config.source_series, &config.target_series, config.pca_dim, out)
    })?;
    let atlas = read_labels(&config.atlas, config.n_roi)?;
    check_vertex_count("atlas", atlas.len(), graph.adjacency.vertex_count())?;

    let (params, history) = manifest.time("train", || {
        let source = BrainGraph::new(graph.adjacency.clone(), graph.pca.source.clone())?;
        let target = BrainGraph::new(graph.adjacency.clone(), graph.pca.target.clone())?;
        let core = core_region(&graph.adjacency, &atlas, config.train.core_fraction)?;
        let batch = DomainBatch::new(source, atlas.clone(), target, &core)?;
        train(&batch, &config.train)
    })?;
    write_checkpoint(&out.join(CHECKPOINT_FILE), &params)?;
    write_history(&out.join(HISTORY_FILE), &history)?;

    let labels_path = out.join(LABELS_FILE);
    manifest.time("predict", || cmd_predict(out, &out.join(CHECKPOINT_FILE), false, &labels_path))?;

    let inputs = EvaluateInputs {
        labels: Some(labels_path),
        truth: config.truth.clone(),
        series: Some(config.target_series.clone()),
        sessions: Vec::new(),
        n_roi: Some(atlas.n_roi()),
    };
    let report = manifest.time("evaluate", || {
        cmd_evaluate(&inputs, &out.join(METRICS_FILE), &out.join(METRICS_CSV_FILE))
    })?;
    if let Some(d) = &report.dice {
        manifest.results.insert("dice_mean".into(), d.mean);
    }
    if let Some(h) = &report.homogeneity {
        manifest.results.insert("homogeneity_mean".into(), h.mean);
    }
    for name in [
        GRAPH_FILE,
        SOURCE_FC_FILE,
        TARGET_FC_FILE,
        SOURCE_FEATURES_FILE,
        TARGET_FEATURES_FILE,
        CHECKPOINT_FILE,
        HISTORY_FILE,
        LABELS_FILE,
        METRICS_FILE,
        METRICS_CSV_FILE,
    ] {
        manifest.add_artifact(out, name)?;
    }
    manifest.write(out)?;
    Ok(report)
}
