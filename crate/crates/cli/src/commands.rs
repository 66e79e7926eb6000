use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vreid_core::dataset::{merge_label_spaces, resolve_records, split_train_val, SourceManifest, Split};
use vreid_core::embedhead::HeadConfig;
use vreid_core::eval::{evaluate, judgments_from_meta, EvalConfig};
use vreid_core::experiment::{run_ablation, ExperimentConfig};
use vreid_core::io::{load_embeddings, load_head, save_embeddings, save_head, RawEmbeddings};
use vreid_core::postprocess::{pipeline, PipelineConfig, PipelineInputs, Step, StepReport, ViewSet};
use vreid_core::retrieval::{rank_gallery, read_meta, EmbeddingMeta, EmbeddingStore, RankingResult};
use vreid_core::synth::{generate, SynthConfig};
use vreid_core::trainer::{train_epochs, train_stage1, train_stage2, StageConfig, TrainingSet};
use vreid_core::{version_info, Error};

use crate::Command;

/// Exit code of the first toolkit error in the chain; anything else is
/// treated as a data problem (unreadable or malformed input).
pub fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(3, |e| e.exit_code() as u8)
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Metadata sidecar written next to an embedding file.
pub fn sidecar(emb: &Path) -> PathBuf {
    let mut s = emb.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<SourceManifest>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            SourceManifest::read_jsonl(p, i as u32 + 1).with_context(|| format!("reading manifest {}", p.display()))
        })
        .collect()
}

fn feature_rows(path: &Path) -> Result<Vec<Vec<f32>>> {
    let raw = load_embeddings(path).with_context(|| format!("reading features {}", path.display()))?;
    Ok(raw.rows().map(<[f32]>::to_vec).collect())
}

fn load_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::load(path, sidecar(path)).with_context(|| format!("loading {}", path.display()))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Merge { manifests, out } => merge(&manifests, &out),
        Command::Synth { config, seed, holdout, out } => synth(config.as_deref(), seed, holdout, &out),
        Command::Train {
            stage,
            manifests,
            features,
            config,
            seed,
            resume,
            out,
            log,
        } => train(TrainArgs {
            stage,
            manifests,
            features,
            config,
            seed,
            resume,
            out,
            log,
        }),
        Command::Embed {
            manifest,
            features,
            source_id,
            ckpt,
            split,
            out,
        } => embed(&manifest, &features, source_id, ckpt.as_deref(), split.as_deref(), &out),
        Command::Rank { query, gallery, out } => rank(&query, &gallery, &out),
        Command::Post {
            queries,
            galleries,
            steps,
            config,
            dbscan_eps,
            min_pts,
            qe_inclusive,
            tau,
            k1,
            k2,
            lambda,
            cam_clusters,
            evaluate,
            out,
            report,
        } => {
            let mut cfg: PipelineConfig = read_json(config.as_deref())?;
            if let Some(v) = dbscan_eps {
                cfg.dbscan.eps = v;
            }
            if let Some(v) = min_pts {
                cfg.dbscan.min_pts = v;
            }
            cfg.qe_inclusive |= qe_inclusive;
            if let Some(v) = tau {
                cfg.temporal.tau = v;
            }
            if let Some(v) = k1 {
                cfg.rerank.k1 = v;
            }
            if let Some(v) = k2 {
                cfg.rerank.k2 = v;
            }
            if let Some(v) = lambda {
                cfg.rerank.lambda = v;
            }
            if evaluate && cfg.eval.is_none() {
                cfg.eval = Some(EvalConfig::default());
            }
            post(&queries, &galleries, &steps, cfg, cam_clusters.as_deref(), &out, report.as_deref())
        }
        Command::Eval {
            ranking,
            manifest,
            source_id,
            query_meta,
            gallery_meta,
            k,
            protocol,
            truncate,
            out,
            per_query,
        } => {
            let (qm, gm) = match (manifest, query_meta, gallery_meta) {
                (Some(m), _, _) => split_meta(&m, source_id)?,
                (None, Some(q), Some(g)) => (read_meta(&q)?, read_meta(&g)?),
                _ => return Err(config_err("eval needs --manifest or both --query-meta and --gallery-meta")),
            };
            let cfg = EvalConfig {
                ks: k,
                protocol: protocol.parse()?,
                truncate,
            };
            eval(&ranking, &qm, &gm, &cfg, out.as_deref(), per_query.as_deref())
        }
        Command::Ablate { config, out } => {
            let mut cfg: ExperimentConfig = read_json(config.as_deref())?;
            if out.is_some() {
                cfg.out_dir = out;
            }
            if cfg.out_dir.is_none() {
                return Err(config_err("ablate needs --out or out_dir in the config"));
            }
            let report = run_ablation(&cfg)?;
            print!("{}", report.to_markdown()?);
            Ok(())
        }
        Command::Version => {
            print!("{}", version_info());
            Ok(())
        }
    }
}

fn merge(paths: &[PathBuf], out: &Path) -> Result<()> {
    let manifests = load_manifests(paths)?;
    let space = merge_label_spaces(&manifests)?;
    space.save_json(out)?;
    println!("merged {} sources into {} classes", manifests.len(), space.num_classes);
    Ok(())
}

fn synth(config: Option<&Path>, seed: Option<u64>, holdout: usize, out: &Path) -> Result<()> {
    let mut cfg: SynthConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut data = generate(&cfg)?;
    if holdout > 0 {
        // held-out identities: one query per camera, every other image in the gallery
        let target = &mut data.manifests[0];
        let split = split_train_val(target, holdout, cfg.seed)?;
        for (i, r) in target.records.iter_mut().enumerate() {
            if split.val_classes.contains(&r.local_class) {
                r.split = if split.val_query.contains(&i) { Split::Query } else { Split::Gallery };
            }
        }
    }
    fs::create_dir_all(out)?;
    for (m, rows) in data.manifests.iter().zip(&data.features) {
        let stem = format!("source{}", m.source_id);
        m.write_jsonl(out.join(format!("{stem}.jsonl")))?;
        let raw = RawEmbeddings {
            count: rows.len(),
            dim: cfg.feature_dim,
            normalized: true,
            data: rows.iter().flatten().copied().collect(),
        };
        save_embeddings(out.join(format!("{stem}.rfeb")), &raw)?;
    }
    write_json(&out.join("synth_config.json"), &cfg)?;
    println!("wrote {} sources to {}", data.manifests.len(), out.display());
    Ok(())
}

/// Contents of `train --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub head: HeadConfig,
    pub stage1: StageConfig,
    #[serde(deserialize_with = "StageConfig::deserialize_stage2")]
    pub stage2: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head: HeadConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
        }
    }
}

struct TrainArgs {
    stage: u8,
    manifests: Vec<PathBuf>,
    features: Vec<PathBuf>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    resume: Option<PathBuf>,
    out: PathBuf,
    log: Option<PathBuf>,
}

fn train(a: TrainArgs) -> Result<()> {
    if a.manifests.len() != a.features.len() {
        return Err(config_err(format!(
            "{} manifests but {} feature files",
            a.manifests.len(),
            a.features.len()
        )));
    }
    let cfg: TrainConfig = read_json(a.config.as_deref())?;
    let mut stage = if a.stage == 1 { cfg.stage1 } else { cfg.stage2 };
    if let Some(s) = a.seed {
        stage.seed = s;
    }

    // only training-split records are used; features stay row-aligned
    let mut manifests = Vec::new();
    let mut features = Vec::new();
    for (m, f) in load_manifests(&a.manifests)?.into_iter().zip(&a.features) {
        let rows = feature_rows(f)?;
        if rows.len() != m.records.len() {
            return Err(Error::Data(format!(
                "{} has {} rows but its manifest has {} records",
                f.display(),
                rows.len(),
                m.records.len()
            ))
            .into());
        }
        let keep: Vec<usize> = (0..rows.len()).filter(|&i| m.records[i].split == Split::Train).collect();
        features.push(keep.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>());
        manifests.push(SourceManifest {
            source_id: m.source_id,
            records: keep.iter().map(|&i| m.records[i].clone()).collect(),
        });
    }
    let space = merge_label_spaces(&manifests)?;
    let mut records = Vec::new();
    for (m, f) in manifests.iter().zip(&features) {
        let n = records.len();
        records.extend(resolve_records(m, &space, Some(f), n)?);
    }

    let (params, log) = match (a.stage, &a.resume) {
        (1, None) => train_stage1(&records, &space, &cfg.head, &stage)?,
        (1, Some(ckpt)) => {
            let mut params = load_head(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let set = TrainingSet::from_records(&records, &space)?;
            let log = train_epochs(&mut params, &set, &stage)?;
            (params, log)
        }
        (_, Some(ckpt)) => {
            let start = load_head(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            train_stage2(&start, &records, &space, &stage)?
        }
        (_, None) => return Err(config_err("stage 2 needs a stage-1 checkpoint via --resume")),
    };
    save_head(&a.out, &params)?;
    space.save_json(with_suffix(&a.out, ".space.json"))?;
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    log.write_csv(&log_path)?;
    println!(
        "stage {} trained {} epochs on {} records, final loss {:.6}",
        a.stage,
        log.epochs.len(),
        records.len(),
        log.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| config_err(format!("unknown split {s:?}; use train, query or gallery")))
}

fn manifest_meta(m: &SourceManifest, idx: &[usize]) -> Vec<EmbeddingMeta> {
    idx.iter()
        .map(|&i| {
            let r = &m.records[i];
            EmbeddingMeta {
                image_id: r.image_id.clone(),
                source_id: m.source_id,
                class: r.local_class,
                camera_id: r.camera_id,
                timestamp: r.timestamp,
            }
        })
        .collect()
}

fn split_positions(m: &SourceManifest, split: Option<Split>) -> Vec<usize> {
    (0..m.records.len())
        .filter(|&i| split.is_none_or(|s| m.records[i].split == s))
        .collect()
}

fn split_meta(manifest: &Path, source_id: u32) -> Result<(Vec<EmbeddingMeta>, Vec<EmbeddingMeta>)> {
    let m = SourceManifest::read_jsonl(manifest, source_id)?;
    let q = manifest_meta(&m, &split_positions(&m, Some(Split::Query)));
    let g = manifest_meta(&m, &split_positions(&m, Some(Split::Gallery)));
    Ok((q, g))
}

fn embed(
    manifest: &Path,
    features: &Path,
    source_id: u32,
    ckpt: Option<&Path>,
    split: Option<&str>,
    out: &Path,
) -> Result<()> {
    let split = split.map(parse_split).transpose()?;
    let m = SourceManifest::read_jsonl(manifest, source_id)?;
    let rows = feature_rows(features)?;
    if rows.len() != m.records.len() {
        return Err(Error::Data(format!(
            "{} has {} rows but the manifest has {} records",
            features.display(),
            rows.len(),
            m.records.len()
        ))
        .into());
    }
    let idx = split_positions(&m, split);
    let input: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| rows[i].iter().map(|&v| v as f64).collect())
        .collect();
    let embedded = match ckpt {
        None => input,
        Some(path) => {
            let params = load_head(path).with_context(|| format!("loading {}", path.display()))?;
            let x = ndarray_from(&input, params.input_dim())?;
            let f = params.embed(x.view())?;
            f.rows().into_iter().map(|r| r.to_vec()).collect()
        }
    };
    let store = EmbeddingStore::from_rows(&embedded, manifest_meta(&m, &idx))?.normalized()?;
    store.save(out, sidecar(out))?;
    println!("embedded {} records into {}", store.len(), out.display());
    Ok(())
}

fn ndarray_from(rows: &[Vec<f64>], dim: usize) -> Result<Array2<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: r.len(),
            context: "feature dimension vs checkpoint input",
        }
        .into());
    }
    Ok(Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]))
}

fn rank(query: &Path, gallery: &Path, out: &Path) -> Result<()> {
    let q = load_store(query)?;
    let g = load_store(gallery)?;
    let ranking = rank_gallery(&q, &g)?;
    ranking.write_jsonl(out, Some(q.meta()))?;
    println!("ranked {} queries against {} gallery images", q.len(), g.len());
    Ok(())
}

#[derive(Deserialize)]
struct CamClusterLine {
    image_id: String,
    cluster: i64,
}

fn read_cam_clusters(path: &Path) -> Result<HashMap<String, i64>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("reading {}", path.display()))?);
    let mut map = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: CamClusterLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if map.insert(l.image_id.clone(), l.cluster).is_some() {
            return Err(Error::Data(format!("{}: duplicate image_id {:?}", path.display(), l.image_id)).into());
        }
    }
    Ok(map)
}

fn view_set(paths: &[PathBuf], clusters: Option<&HashMap<String, i64>>) -> Result<ViewSet> {
    let stores: Vec<EmbeddingStore> = paths.iter().map(|p| load_store(p)).collect::<Result<_>>()?;
    let meta = stores[0].meta().to_vec();
    for (s, p) in stores.iter().zip(paths).skip(1) {
        if s.meta() != meta.as_slice() {
            return Err(Error::Data(format!("{} lists different images than {}", p.display(), paths[0].display())).into());
        }
    }
    Ok(ViewSet {
        models: stores
            .iter()
            .map(|s| (0..s.len()).map(|i| vec![s.row_f64(i)]).collect())
            .collect(),
        cam_clusters: clusters.map(|c| meta.iter().map(|m| c.get(&m.image_id).copied()).collect()),
        meta,
    })
}

#[derive(Serialize)]
struct PostReport<'a> {
    version_info: String,
    steps: Vec<&'static str>,
    config: &'a PipelineConfig,
    reports: &'a [StepReport],
}

fn post(
    queries: &[PathBuf],
    galleries: &[PathBuf],
    steps: &str,
    cfg: PipelineConfig,
    cam_clusters: Option<&Path>,
    out: &Path,
    report: Option<&Path>,
) -> Result<()> {
    if queries.len() != galleries.len() {
        return Err(config_err(format!(
            "{} query models but {} gallery models",
            queries.len(),
            galleries.len()
        )));
    }
    let steps = Step::parse_list(steps)?;
    let clusters = cam_clusters.map(read_cam_clusters).transpose()?;
    let inputs = PipelineInputs {
        query: view_set(queries, clusters.as_ref())?,
        gallery: view_set(galleries, clusters.as_ref())?,
    };
    let output = pipeline(&inputs, &steps, &cfg)?;
    output.ranking.write_jsonl(out, Some(&inputs.query.meta))?;
    if let Some(path) = report {
        write_json(
            path,
            &PostReport {
                version_info: version_info(),
                steps: steps.iter().map(|s| s.name()).collect(),
                config: &cfg,
                reports: &output.reports,
            },
        )?;
    }
    for r in &output.reports {
        let map = r.map.map_or("-".to_string(), |m| format!("{:.4}", m));
        println!("{:<20} candidates {:>8} mAP {map}", r.step, r.candidates);
    }
    Ok(())
}

fn eval(
    ranking: &Path,
    qm: &[EmbeddingMeta],
    gm: &[EmbeddingMeta],
    cfg: &EvalConfig,
    out: Option<&Path>,
    per_query: Option<&Path>,
) -> Result<()> {
    let r = RankingResult::read_jsonl(ranking).with_context(|| format!("reading {}", ranking.display()))?;
    if let Some(bad) = r.queries.iter().flat_map(|q| &q.indices).find(|&&i| i >= gm.len()) {
        return Err(Error::Data(format!("ranking refers to gallery index {bad} but the gallery has {}", gm.len())).into());
    }
    let judgments = judgments_from_meta(qm, gm, cfg.protocol);
    let report = evaluate(&r, &judgments, cfg)?;
    match out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(path) = per_query {
        report.write_per_query_csv(path)?;
    }
    let ranks: Vec<String> = report.rank_at.iter().map(|(k, v)| format!("R{k} {v:.4}")).collect();
    eprintln!("mAP {:.4} {} ({} queries, {} skipped)", report.map, ranks.join(" "), report.num_queries, report.skipped);
    Ok(())
}
