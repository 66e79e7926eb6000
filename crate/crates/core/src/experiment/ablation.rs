use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bench::{standard_synth, standard_train, SourceData, TrainBench, TrainBenchConfig};
use crate::dataset::{SourceId, SourceManifest};
use crate::embedhead::HeadParameters;
use crate::error::{Error, Result};
use crate::io::load_embeddings;
use crate::postprocess::{PipelineConfig, Step};
use crate::synth::SynthConfig;
use crate::trainer::{SamplerKind, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFiles {
    pub source_id: SourceId,
    /// JSON-lines manifest.
    pub manifest: PathBuf,
    /// Embedding file row-aligned with the manifest.
    pub features: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated per seed; the run seed replaces `config.seed`.
    Synthetic { config: SynthConfig },
    Files { sources: Vec<SourceFiles> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmSpec {
    pub name: String,
    /// Auxiliary sources pooled with the target in Stage I.
    pub aux_sources: Vec<SourceId>,
    /// Fine-tune on the target after Stage I.
    pub stage2: bool,
    pub sampler: SamplerKind,
    /// Post-processing applied to the validation ranking.
    pub post_steps: Vec<Step>,
}

impl Default for ArmSpec {
    fn default() -> Self {
        ArmSpec {
            name: "target_only".into(),
            aux_sources: vec![],
            stage2: false,
            sampler: SamplerKind::Naive,
            post_steps: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub bench: TrainBenchConfig,
    pub post: PipelineConfig,
    pub arms: Vec<ArmSpec>,
    pub seeds: Vec<u64>,
    /// Where report files are written; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let arm = |name: &str, aux: &[SourceId], stage2: bool, sampler: SamplerKind| ArmSpec {
            name: name.into(),
            aux_sources: aux.to_vec(),
            stage2,
            sampler,
            post_steps: vec![],
        };
        ExperimentConfig {
            data: DataSource::Synthetic {
                config: standard_synth(0),
            },
            bench: standard_train(),
            post: PipelineConfig::default(),
            arms: vec![
                arm("target_only", &[], false, SamplerKind::Naive),
                arm("plus_2", &[2], false, SamplerKind::Naive),
                arm("plus_2_3", &[2, 3], false, SamplerKind::Naive),
                arm("all_sources", &[2, 3, 4], false, SamplerKind::Naive),
                arm("two_stage", &[2, 3, 4], true, SamplerKind::Naive),
                arm("all_sources_balanced", &[2, 3, 4], false, SamplerKind::Balanced),
            ],
            seeds: (0..5).collect(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Check arms and inputs without training anything.
    fn check(&self) -> Result<Vec<SourceId>> {
        let ids: Vec<SourceId> = match &self.data {
            DataSource::Synthetic { config } => {
                config.validate()?;
                (1..=config.sources.len() as SourceId).collect()
            }
            DataSource::Files { sources } => {
                for s in sources {
                    for p in [&s.manifest, &s.features] {
                        if !p.is_file() {
                            return Err(Error::data(format!("input file {} does not exist", p.display())));
                        }
                    }
                }
                sources.iter().map(|s| s.source_id).collect()
            }
        };
        if !ids.contains(&self.bench.target_source) {
            return Err(Error::config(format!("target source {} is not among the inputs", self.bench.target_source)));
        }
        for arm in &self.arms {
            for a in &arm.aux_sources {
                if !ids.contains(a) || *a == self.bench.target_source {
                    return Err(Error::config(format!("arm {}: invalid auxiliary source {a}", arm.name)));
                }
            }
        }
        Ok(ids)
    }

    fn load_files(sources: &[SourceFiles]) -> Result<Vec<SourceData>> {
        sources
            .iter()
            .map(|s| {
                let manifest = SourceManifest::read_jsonl(&s.manifest, s.source_id)?;
                let raw = load_embeddings(&s.features)?;
                let features = raw.rows().map(|r| r.to_vec()).collect();
                Ok(SourceData { manifest, features })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
    pub stage1_final_loss: Option<f64>,
    pub stage2_final_loss: Option<f64>,
    /// Mean angular margin of target training samples after Stage I.
    pub stage1_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub seeds: usize,
    pub median_map: f64,
    pub median_rank1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub resolved_config: ExperimentConfig,
    pub version_info: String,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<SummaryRow>,
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

type Stage1Key = (Vec<SourceId>, SamplerKind);

/// Run every arm for every seed. Stage-I runs shared by several arms are
/// trained once per seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.check()?;
    let files = match &cfg.data {
        DataSource::Files { sources } if !cfg.arms.is_empty() => Some(ExperimentConfig::load_files(sources)?),
        _ => None,
    };
    let mut rows = Vec::new();
    if !cfg.arms.is_empty() {
        for &seed in &cfg.seeds {
            let bench = match (&cfg.data, &files) {
                (DataSource::Synthetic { config }, _) => TrainBench::synthetic(config, &cfg.bench, seed)?,
                (DataSource::Files { .. }, Some(f)) => TrainBench::new(cfg.bench.with_seed(seed), f.clone(), seed)?,
                _ => unreachable!("files are loaded whenever arms exist"),
            };
            let mut stage1: HashMap<Stage1Key, (HeadParameters, TrainLog)> = HashMap::new();
            for arm in &cfg.arms {
                rows.push(run_arm(&bench, arm, seed, &cfg.post, &mut stage1)?);
            }
        }
    }
    let summary = cfg
        .arms
        .iter()
        .map(|arm| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == arm.name).collect();
            SummaryRow {
                arm: arm.name.clone(),
                seeds: mine.len(),
                median_map: median(&mine.iter().map(|r| r.map).collect::<Vec<_>>()),
                median_rank1: median(&mine.iter().map(|r| r.rank1).collect::<Vec<_>>()),
            }
        })
        .collect();
    let report = AblationReport {
        resolved_config: cfg.clone(),
        version_info: crate::version_info(),
        rows,
        summary,
    };
    if let Some(dir) = &cfg.out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

fn run_arm(
    bench: &TrainBench,
    arm: &ArmSpec,
    seed: u64,
    post: &PipelineConfig,
    cache: &mut HashMap<Stage1Key, (HeadParameters, TrainLog)>,
) -> Result<AblationRow> {
    let mut aux = arm.aux_sources.clone();
    aux.sort_unstable();
    aux.dedup();
    let key = (aux.clone(), arm.sampler);
    if !cache.contains_key(&key) {
        let run = bench.stage1(&aux, arm.sampler)?;
        cache.insert(key.clone(), run);
    }
    let (p1, log1) = &cache[&key];
    let margin = bench.target_margin(p1, &aux)?.mean;
    let (params, log2) = if arm.stage2 {
        let (p, l) = bench.stage2(p1)?;
        (p, Some(l))
    } else {
        (p1.clone(), None)
    };
    let (map, rank_at) = if arm.post_steps.is_empty() {
        let r = bench.evaluate(Some(&params))?;
        (r.map, r.rank_at)
    } else {
        let reports = bench.evaluate_post(Some(&params), &arm.post_steps, post)?;
        let last = reports.last().expect("base report");
        let mut rank_at = std::collections::BTreeMap::new();
        rank_at.insert(1, last.rank1.unwrap_or(f64::NAN));
        (last.map.unwrap_or(f64::NAN), rank_at)
    };
    Ok(AblationRow {
        arm: arm.name.clone(),
        seed,
        map,
        rank1: rank_at.get(&1).copied().unwrap_or(f64::NAN),
        rank5: rank_at.get(&5).copied(),
        rank10: rank_at.get(&10).copied(),
        stage1_final_loss: log1.final_loss(),
        stage2_final_loss: log2.and_then(|l| l.final_loss()),
        stage1_margin: Some(margin),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl AblationReport {
    fn header(&self) -> Result<String> {
        let mut s = String::new();
        for line in self.version_info.lines() {
            writeln!(s, "# {line}").unwrap();
        }
        for line in serde_json::to_string(&self.resolved_config)?.lines() {
            writeln!(s, "# config={line}").unwrap();
        }
        Ok(s)
    }

    pub fn to_markdown(&self) -> Result<String> {
        let mut s = String::from("# Ablation report\n\n## Versions\n\n```\n");
        s.push_str(&self.version_info);
        s.push_str("```\n\n## Resolved configuration\n\n```json\n");
        s.push_str(&serde_json::to_string_pretty(&self.resolved_config)?);
        s.push_str("\n```\n");
        if self.rows.is_empty() && self.summary.is_empty() {
            return Ok(s);
        }
        s.push_str("\n## Runs\n\n| arm | seed | mAP | Rank@1 | Rank@5 | Rank@10 | stage-1 loss | stage-2 loss | stage-1 margin |\n|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {} | {} | {} | {} | {} |",
                r.arm,
                r.seed,
                r.map,
                r.rank1,
                opt(r.rank5),
                opt(r.rank10),
                opt(r.stage1_final_loss),
                opt(r.stage2_final_loss),
                opt(r.stage1_margin)
            )
            .unwrap();
        }
        s.push_str("\n## Median over seeds\n\n| arm | seeds | mAP | Rank@1 |\n|---|---|---|---|\n");
        for r in &self.summary {
            writeln!(s, "| {} | {} | {:.4} | {:.4} |", r.arm, r.seeds, r.median_map, r.median_rank1).unwrap();
        }
        Ok(s)
    }

    pub fn rows_csv(&self) -> Result<String> {
        let mut s = self.header()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "seed", "map", "rank1", "rank5", "rank10", "stage1_final_loss", "stage2_final_loss", "stage1_margin"])?;
        for r in &self.rows {
            w.write_record([
                r.arm.clone(),
                r.seed.to_string(),
                format!("{:.6}", r.map),
                format!("{:.6}", r.rank1),
                opt(r.rank5),
                opt(r.rank10),
                opt(r.stage1_final_loss),
                opt(r.stage2_final_loss),
                opt(r.stage1_margin),
            ])?;
        }
        s.push_str(&String::from_utf8(w.into_inner().map_err(|e| Error::data(e.to_string()))?).unwrap());
        Ok(s)
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut s = self.header()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "seeds", "median_map", "median_rank1"])?;
        for r in &self.summary {
            w.write_record([
                r.arm.clone(),
                r.seeds.to_string(),
                format!("{:.6}", r.median_map),
                format!("{:.6}", r.median_rank1),
            ])?;
        }
        s.push_str(&String::from_utf8(w.into_inner().map_err(|e| Error::data(e.to_string()))?).unwrap());
        Ok(s)
    }

    /// Write `report.md`, `rows.csv`, `summary.csv` and
    /// `resolved_config.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.md"), self.to_markdown()?)?;
        fs::write(dir.join("rows.csv"), self.rows_csv()?)?;
        fs::write(dir.join("summary.csv"), self.summary_csv()?)?;
        fs::write(
            dir.join("resolved_config.json"),
            serde_json::to_string_pretty(&self.resolved_config)?,
        )?;
        Ok(())
    }
}
