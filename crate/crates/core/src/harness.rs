//! Run configuration and the command entry points behind the CLI:
//! dataset generation, training with metrics and checkpoints, offline
//! evaluation, the loss-weight/factor ablation table, and the
//! sampled-vs-full alignment timing study.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::AlignmentConfig;
use crate::data::{self, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{
    checkpoint, codebook_text_similarity, reconstruct, train_step, ModelConfig, Sample,
    TrainState,
};
use crate::text::{granulate, EmbeddingProvider, GranularText, Lexicon, GRANULARITIES};
use crate::vq::codebook_metrics;

/// Every tunable in one flat document. Unknown keys are rejected; a
/// serialized copy is written into each run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub image_size: usize,
    pub d_z: usize,
    /// Text embedding dimension.
    pub d: usize,
    pub k: usize,
    pub factors: Vec<usize>,
    pub q: usize,
    /// Sinkhorn regularization relative to the mean of each cost matrix.
    pub eps: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub alpha: f64,
    pub beta_p: f64,
    pub gamma_s: f64,
    pub commit_coeff: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub dataset_count: usize,
    /// Load the dataset from this directory (exporting it there first if
    /// absent); empty means generate in memory.
    pub dataset_dir: String,
    pub lexicon_file: String,
    pub embedding_file: String,
    pub checkpoint_every: usize,
    pub out_dir: String,
    pub per_level_codebooks: bool,
    pub quant_terms_all_levels: bool,
    /// Align against the full unit set instead of sampling q targets.
    pub full_set_alignment: bool,
    /// Captions pooled per image by the timing study.
    pub timing_pool: usize,
    /// Also sweep the factor presets in the ablation table.
    pub ablate_factors: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 32,
            d_z: 32,
            d: 32,
            k: 64,
            factors: vec![4, 8, 16],
            q: 8,
            eps: 0.05,
            tol: 1e-6,
            max_iter: 1000,
            alpha: 0.001,
            beta_p: 0.001,
            gamma_s: 0.001,
            commit_coeff: 0.25,
            lr: 1e-3,
            batch: 8,
            steps: 200,
            seed: 0,
            dataset_count: 512,
            dataset_dir: String::new(),
            lexicon_file: String::new(),
            embedding_file: String::new(),
            checkpoint_every: 0,
            out_dir: "runs/out".to_string(),
            per_level_codebooks: false,
            quant_terms_all_levels: true,
            full_set_alignment: false,
            timing_pool: 16,
            ablate_factors: false,
        }
    }
}

impl RunConfig {
    /// Parses a config file: a JSON object if the content starts with
    /// `{`, otherwise `key=value` lines (`#` comments allowed). Comma
    /// lists become numeric arrays.
    pub fn from_source(src: &str) -> Result<RunConfig> {
        let trimmed = src.trim_start();
        let value: serde_json::Value = if trimmed.starts_with('{') {
            serde_json::from_str(src).map_err(|e| Error::Config(e.to_string()))?
        } else {
            let mut map = serde_json::Map::new();
            for (lineno, line) in src.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, raw) = line.split_once('=').ok_or_else(|| Error::Parse {
                    what: "config",
                    line: lineno + 1,
                    details: format!("expected key=value, got {line:?}"),
                })?;
                map.insert(key.trim().to_string(), parse_kv_value(raw.trim()));
            }
            serde_json::Value::Object(map)
        };
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        RunConfig::from_source(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        let err = |msg: String| Err(Error::Config(msg));
        let f3 = self.factors[2];
        if self.image_size / f3 < 2 {
            return err(format!(
                "factor set {:?} at image size {} leaves a {}x{} bottom grid, below the 2x2 minimum",
                self.factors,
                self.image_size,
                self.image_size / f3,
                self.image_size / f3
            ));
        }
        if self.batch == 0 {
            return err("batch must be at least 1".into());
        }
        if self.steps == 0 {
            return err("steps must be at least 1".into());
        }
        if self.dataset_count == 0 {
            return err("dataset_count must be at least 1".into());
        }
        if !(self.eps > 0.0) {
            return err(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.tol > 0.0) {
            return err(format!("tol must be positive, got {}", self.tol));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta_p", self.beta_p),
            ("gamma_s", self.gamma_s),
            ("commit_coeff", self.commit_coeff),
        ] {
            if v < 0.0 || !v.is_finite() {
                return err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.factors.len() != 3 {
            return Err(Error::Config(format!(
                "factors must list exactly 3 values, got {:?}",
                self.factors
            )));
        }
        Ok(ModelConfig {
            image_size: self.image_size,
            d_z: self.d_z,
            d_text: self.d,
            k: self.k,
            factors: [self.factors[0], self.factors[1], self.factors[2]],
            commit_coeff: self.commit_coeff,
            lr: self.lr,
            align: AlignmentConfig {
                q: self.q,
                eps_rel: self.eps,
                tol: self.tol,
                max_iter: self.max_iter,
                alpha: self.alpha,
                beta_p: self.beta_p,
                gamma_s: self.gamma_s,
                full_set: self.full_set_alignment,
            },
            per_level_codebooks: self.per_level_codebooks,
            quant_terms_all_levels: self.quant_terms_all_levels,
        })
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut spec = DatasetSpec::new(self.dataset_count, self.image_size, self.seed);
        if !self.lexicon_file.is_empty() {
            spec.lexicon_file = Some(PathBuf::from(&self.lexicon_file));
        }
        if !self.dataset_dir.is_empty() {
            spec.out_dir = Some(PathBuf::from(&self.dataset_dir));
        }
        spec
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        if self.lexicon_file.is_empty() {
            Ok(Lexicon::builtin())
        } else {
            Lexicon::from_file(Path::new(&self.lexicon_file))
        }
    }

    pub fn provider(&self) -> Result<EmbeddingProvider> {
        if self.embedding_file.is_empty() {
            Ok(EmbeddingProvider::hash(self.d))
        } else {
            let p = EmbeddingProvider::from_table_file(Path::new(&self.embedding_file))?;
            if p.dim() != self.d {
                return Err(Error::Config(format!(
                    "embedding file dimension {} does not match d = {}",
                    p.dim(),
                    self.d
                )));
            }
            Ok(p)
        }
    }
}

fn parse_kv_value(raw: &str) -> serde_json::Value {
    if raw == "true" || raw == "false" {
        return serde_json::Value::Bool(raw == "true");
    }
    if let Ok(i) = raw.parse::<i64>() {
        return serde_json::Value::Number(i.into());
    }
    if let Ok(f) = raw.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(f) {
            return serde_json::Value::Number(n);
        }
    }
    if raw.contains(',') {
        let parts: Option<Vec<serde_json::Value>> = raw
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<i64>()
                    .ok()
                    .map(|i| serde_json::Value::Number(i.into()))
            })
            .collect();
        if let Some(arr) = parts {
            return serde_json::Value::Array(arr);
        }
    }
    serde_json::Value::String(raw.to_string())
}

/// Loads or generates the dataset and runs every caption through the
/// text pipeline.
pub fn prepare_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let spec = cfg.dataset_spec();
    let pairs = match &spec.out_dir {
        Some(dir) if dir.join("index.tsv").exists() => data::load_dir(dir)?,
        Some(dir) => {
            let pairs = data::generate(&spec);
            data::export(&pairs, dir)?;
            pairs
        }
        None => data::generate(&spec),
    };
    attach_text(cfg, pairs)
}

fn attach_text(cfg: &RunConfig, pairs: Vec<(crate::Tensor, String)>) -> Result<Vec<Sample>> {
    let lex = cfg.lexicon()?;
    let provider = cfg.provider()?;
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (image, caption))| {
            let text = granulate(&caption, &lex, &provider)?;
            for g in GRANULARITIES {
                if text.units(g).is_empty() {
                    return Err(Error::Config(format!(
                        "sample {i} has an empty {g:?} granularity: {caption:?}"
                    )));
                }
            }
            Ok(Sample {
                image,
                caption,
                text,
            })
        })
        .collect()
}

/// Generates and exports the dataset; returns the directory written.
pub fn run_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = if cfg.dataset_dir.is_empty() {
        Path::new(&cfg.out_dir).join("dataset")
    } else {
        PathBuf::from(&cfg.dataset_dir)
    };
    let spec = cfg.dataset_spec();
    let pairs = data::generate(&spec);
    // Fail early if any caption would be unusable downstream.
    attach_text(cfg, pairs.clone())?;
    data::export(&pairs, &dir)?;
    Ok(dir)
}

/// One metrics line, serialized as a JSON object per training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub total: f64,
    pub l_vq: f64,
    pub l_w: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub recon_mse: f64,
    pub perplexity_f1: f64,
    pub perplexity_f2: f64,
    pub perplexity_f3: f64,
    pub step_ms: f64,
}

pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub records: Vec<MetricsRecord>,
}

/// Trains for `steps` optimizer updates (resuming if asked), appending
/// one JSON record per step to `metrics.jsonl` and checkpointing every
/// `checkpoint_every` steps plus at the end.
pub fn run_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let run_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    let samples = prepare_samples(cfg)?;
    let mut state = match resume {
        Some(dir) => checkpoint::load(cfg.model_config()?, dir)?,
        None => TrainState::new(cfg.model_config()?, cfg.seed)?,
    };

    let mut metrics_file = std::fs::File::create(run_dir.join("metrics.jsonl"))?;
    let mut records = Vec::new();
    let ckpt_dir = run_dir.join("checkpoints");

    while state.step < cfg.steps as u64 {
        let batch: Vec<&Sample> = (0..cfg.batch)
            .map(|_| {
                use rand::Rng;
                let i = state.rng.gen_range(0..samples.len());
                &samples[i]
            })
            .collect();
        let step_result = train_step(&mut state, &batch);
        let m = match step_result {
            Ok(m) => m,
            Err(e) => {
                metrics_file.flush()?;
                return Err(e);
            }
        };
        let record = MetricsRecord {
            step: m.step,
            total: m.total,
            l_vq: m.l_vq,
            l_w: m.l_w,
            l_p: m.l_p,
            l_s: m.l_s,
            recon_mse: m.recon_mse,
            perplexity_f1: m.perplexity[0],
            perplexity_f2: m.perplexity[1],
            perplexity_f3: m.perplexity[2],
            step_ms: m.step_ms,
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&record)?)?;
        metrics_file.flush()?;
        records.push(record);

        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
            checkpoint::save(&state, &ckpt_dir.join(format!("step-{:06}", state.step)))?;
        }
    }
    let final_ckpt = ckpt_dir.join("final");
    checkpoint::save(&state, &final_ckpt)?;
    Ok(TrainSummary {
        run_dir,
        final_checkpoint: final_ckpt,
        records,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub recon_mse: f64,
    pub similarity: f64,
    pub perplexity_f1: f64,
    pub perplexity_f2: f64,
    pub perplexity_f3: f64,
    pub usage_f1: f64,
    pub usage_f2: f64,
    pub usage_f3: f64,
}

/// Reconstruction error, codebook-text similarity, and per-level usage
/// metrics of a checkpoint over the configured dataset.
pub fn run_eval(cfg: &RunConfig, checkpoint_dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let samples = prepare_samples(cfg)?;
    let state = checkpoint::load(cfg.model_config()?, checkpoint_dir)?;
    eval_state(&state, &samples)
}

pub fn eval_state(state: &TrainState, samples: &[Sample]) -> Result<EvalReport> {
    let mut mse_sum = 0.0;
    let mut level_indices: Vec<Vec<usize>> = vec![Vec::new(); 3];
    for s in samples {
        let (recon, indices) = reconstruct(state, &s.image)?;
        let diff: f64 = recon
            .data()
            .iter()
            .zip(s.image.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / recon.numel() as f64;
        mse_sum += diff;
        for (level, idx) in indices.into_iter().enumerate() {
            level_indices[level].extend(idx);
        }
    }
    let texts: Vec<GranularText> = samples.iter().map(|s| s.text.clone()).collect();
    let similarity = codebook_text_similarity(state, &texts)?;
    let mut perplexity = [0.0; 3];
    let mut usage = [0.0; 3];
    for level in 0..3 {
        let m = codebook_metrics(&level_indices[level], state.cfg.k)?;
        perplexity[level] = m.perplexity;
        usage[level] = m.usage_fraction;
    }
    Ok(EvalReport {
        recon_mse: mse_sum / samples.len() as f64,
        similarity,
        perplexity_f1: perplexity[0],
        perplexity_f2: perplexity[1],
        perplexity_f3: perplexity[2],
        usage_f1: usage[0],
        usage_f2: usage[1],
        usage_f3: usage[2],
    })
}

/// The six loss-weight settings of the ablation table, in order:
/// baseline, +s, +s+p, +s+w, +w+p, all three.
pub fn ablation_settings(cfg: &RunConfig) -> Vec<(String, f64, f64, f64)> {
    let (a, b, g) = (cfg.alpha, cfg.beta_p, cfg.gamma_s);
    vec![
        ("baseline".to_string(), 0.0, 0.0, 0.0),
        ("+s".to_string(), 0.0, 0.0, g),
        ("+s+p".to_string(), 0.0, b, g),
        ("+s+w".to_string(), a, 0.0, g),
        ("+w+p".to_string(), a, b, 0.0),
        ("+w+p+s".to_string(), a, b, g),
    ]
}

pub const FACTOR_PRESETS: [[usize; 3]; 5] = [
    [8, 16, 32],
    [2, 8, 16],
    [2, 4, 16],
    [16, 16, 16],
    [4, 8, 16],
];

/// Runs the weight ablation (and optionally the factor-preset sweep)
/// with a shared seed and dataset; writes `ablate.csv` in the output
/// directory. Per-row errors are recorded in the row and do not stop
/// the remaining rows.
pub fn run_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    let mut csv = String::from("setting,alpha,beta_p,gamma_s,factors,status,recon_mse,similarity\n");

    let run_row = |label: &str, row_cfg: RunConfig| -> String {
        let factors = row_cfg
            .factors
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        match row_cfg
            .validate()
            .and_then(|_| run_train(&row_cfg, None))
            .and_then(|summary| run_eval(&row_cfg, &summary.final_checkpoint))
        {
            Ok(report) => format!(
                "{label},{},{},{},{factors},ok,{:.6},{:.6}\n",
                row_cfg.alpha, row_cfg.beta_p, row_cfg.gamma_s, report.recon_mse, report.similarity
            ),
            Err(e) => format!(
                "{label},{},{},{},{factors},\"error: {}\",,\n",
                row_cfg.alpha,
                row_cfg.beta_p,
                row_cfg.gamma_s,
                e.to_string().replace('"', "'")
            ),
        }
    };

    for (i, (label, a, b, g)) in ablation_settings(cfg).into_iter().enumerate() {
        let mut row_cfg = cfg.clone();
        row_cfg.alpha = a;
        row_cfg.beta_p = b;
        row_cfg.gamma_s = g;
        row_cfg.ablate_factors = false;
        row_cfg.out_dir = out.join(format!("row_{i}_{label}")).display().to_string();
        csv.push_str(&run_row(&label, row_cfg));
    }

    if cfg.ablate_factors {
        for (i, preset) in FACTOR_PRESETS.iter().enumerate() {
            let mut row_cfg = cfg.clone();
            row_cfg.factors = preset.to_vec();
            row_cfg.ablate_factors = false;
            row_cfg.out_dir = out.join(format!("factors_{i}")).display().to_string();
            let label = format!("factors-{}-{}-{}", preset[0], preset[1], preset[2]);
            csv.push_str(&run_row(&label, row_cfg));
        }
    }

    let path = out.join("ablate.csv");
    std::fs::write(&path, csv)?;
    Ok(path)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingReport {
    pub sampled_ms_mean: f64,
    pub full_ms_mean: f64,
    pub ratio: f64,
    pub steps: usize,
    pub min_units_word: usize,
    pub min_units_phrase: usize,
    pub min_units_sentence: usize,
}

/// Mean step time with q-target sampling versus full-set alignment on
/// the same pooled-caption data and seed. Captions are pooled across
/// `timing_pool` samples and padded with a vocabulary sweep so every
/// granularity carries a large unit set.
pub fn run_time_sampling(cfg: &RunConfig) -> Result<TimingReport> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;

    let spec = cfg.dataset_spec();
    let pairs = data::generate(&spec);
    let pool = cfg.timing_pool.max(1);
    let sweep = data::vocabulary_sweep();
    let pooled: Vec<(crate::Tensor, String)> = (0..pairs.len())
        .map(|i| {
            let mut caption = String::new();
            for j in 0..pool {
                caption.push_str(&pairs[(i + j) % pairs.len()].1);
                caption.push(' ');
            }
            caption.push_str(&sweep);
            (pairs[i].0.clone(), caption)
        })
        .collect();
    let samples = attach_text(cfg, pooled)?;

    let mut min_units = [usize::MAX; 3];
    for s in &samples {
        for (i, g) in GRANULARITIES.iter().enumerate() {
            min_units[i] = min_units[i].min(s.text.units(*g).len());
        }
    }
    if min_units.iter().any(|&m| m < 32) {
        return Err(Error::Config(format!(
            "timing study needs at least 32 units per granularity, got {:?}; raise timing_pool (currently {})",
            min_units, pool
        )));
    }

    let measure = |full_set: bool| -> Result<f64> {
        let mut mode_cfg = cfg.clone();
        mode_cfg.full_set_alignment = full_set;
        let mut state = TrainState::new(mode_cfg.model_config()?, cfg.seed)?;
        let mut total_ms = 0.0;
        for _ in 0..cfg.steps {
            let batch: Vec<&Sample> = (0..cfg.batch)
                .map(|_| {
                    use rand::Rng;
                    let i = state.rng.gen_range(0..samples.len());
                    &samples[i]
                })
                .collect();
            let m = train_step(&mut state, &batch)?;
            total_ms += m.step_ms;
        }
        Ok(total_ms / cfg.steps as f64)
    };

    let sampled_ms_mean = measure(false)?;
    let full_ms_mean = measure(true)?;
    let report = TimingReport {
        sampled_ms_mean,
        full_ms_mean,
        ratio: full_ms_mean / sampled_ms_mean,
        steps: cfg.steps,
        min_units_word: min_units[0],
        min_units_phrase: min_units[1],
        min_units_sentence: min_units[2],
    };
    std::fs::write(
        out.join("timing.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
