//! Hierarchical encoder/decoder, the end-to-end training step, the
//! codebook-text similarity metric, and checkpointing.
//!
//! Three code grids at increasing down-sampling factors are quantized
//! against the codebook; the decoder reconstructs the image from the
//! level-3 straight-through composite only, and each level is aligned
//! with one text granularity (words at the finest grid, phrases in the
//! middle, sentences at the coarsest).
//!
//! Every forward pass can run in two modes: `Fresh` draws new noise and
//! target samples and solves transport, capturing everything it drew;
//! `Replay` re-runs the identical computation with the captured draws,
//! discrete code assignments, transport plans, and stop-gradient values
//! held constant. Replay makes the training objective a smooth function
//! of the parameters, which is what central finite differences need.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{
    granularity_loss, granularity_loss_replay, total_loss, AlignmentConfig, AlignmentDraws,
    GaussianHead,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, Fnn2, Param, PatchMap};
use crate::tensor::{Tape, Tensor};
use crate::text::{GranularText, Granularity, GRANULARITIES};
use crate::transport::DenseMatrix;
use crate::vq::{codebook_metrics, mse, nearest_indices, quantize_with_indices, Codebook};

/// Model-level configuration (the harness layers run/dataset knobs on
/// top of this).
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub image_size: usize,
    pub d_z: usize,
    pub d_text: usize,
    pub k: usize,
    pub factors: [usize; 3],
    pub commit_coeff: f64,
    pub lr: f64,
    pub align: AlignmentConfig,
    /// One codebook per hierarchy level instead of a shared one.
    pub per_level_codebooks: bool,
    /// Apply codebook/commitment terms at every level (default) or only
    /// at the deepest one.
    pub quant_terms_all_levels: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            d_z: 32,
            d_text: 32,
            k: 64,
            factors: [4, 8, 16],
            commit_coeff: 0.25,
            lr: 1e-3,
            align: AlignmentConfig::default(),
            per_level_codebooks: false,
            quant_terms_all_levels: true,
        }
    }
}

impl ModelConfig {
    /// Structural validity: factors non-decreasing with integer merge
    /// blocks, image extents divisible by every factor, sane sizes.
    /// A 1x1 bottom grid is legal here; the run-level config imposes
    /// its own stricter minimum.
    pub fn validate(&self) -> Result<()> {
        let [f1, f2, f3] = self.factors;
        let err = |msg: String| Err(Error::Config(msg));
        if f1 == 0 || f2 % f1 != 0 || f3 % f2 != 0 || f1 > f2 || f2 > f3 {
            return err(format!(
                "factors {:?} must be non-decreasing with integer ratios",
                self.factors
            ));
        }
        for f in self.factors {
            if self.image_size % f != 0 {
                return err(format!(
                    "image size {} not divisible by factor {f}",
                    self.image_size
                ));
            }
        }
        if self.k < 2 {
            return err(format!("codebook size {} too small", self.k));
        }
        if self.d_z == 0 || self.d_text == 0 {
            return err("zero feature dimension".to_string());
        }
        if self.align.q == 0 && !self.align.full_set {
            return err("sample count q must be at least 1".to_string());
        }
        Ok(())
    }
}

/// 2x2-style grid merger: fold a `b x b` neighborhood into channels,
/// then mix back down to `d_z` cellwise.
#[derive(Clone, Debug)]
pub struct MergeBlock {
    pub block: usize,
    pub mix: Fnn2,
}

/// Patch stem plus per-stage cellwise nets and two grid mergers,
/// producing grids at the three configured factors.
#[derive(Clone, Debug)]
pub struct HierEncoder {
    pub factors: [usize; 3],
    pub stem: PatchMap,
    pub stages: Vec<Fnn2>,
    pub merges: Vec<MergeBlock>,
}

impl HierEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> HierEncoder {
        let [f1, f2, f3] = cfg.factors;
        let d = cfg.d_z;
        let stem = PatchMap::for_patchify("enc.stem", f1, 3, d, rng);
        let stages = (1..=3)
            .map(|j| Fnn2::with_default_hidden(&format!("enc.stage{j}"), d, d, rng))
            .collect();
        let merges = [(f2 / f1, "enc.merge1"), (f3 / f2, "enc.merge2")]
            .into_iter()
            .map(|(b, name)| MergeBlock {
                block: b,
                mix: Fnn2::with_default_hidden(&format!("{name}.mix"), b * b * d, d, rng),
            })
            .collect();
        HierEncoder {
            factors: cfg.factors,
            stem,
            stages,
            merges,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.stem.params();
        for s in &self.stages {
            ps.extend(s.params());
        }
        for m in &self.merges {
            ps.extend(m.mix.params());
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.stem.params_mut();
        for s in &mut self.stages {
            ps.extend(s.params_mut());
        }
        for m in &mut self.merges {
            ps.extend(m.mix.params_mut());
        }
        ps
    }
}

fn apply_cellwise(tape: &Tape, net: &Fnn2, grid: &Tensor) -> Result<Tensor> {
    let (h, w, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let out = net.apply_rows(tape, &grid.reshape(&[h * w, c])?)?;
    let d_out = out.shape()[1];
    out.reshape(&[h, w, d_out])
}

/// Three pre-quantization grids at factors `f1 < f2 < f3`; each deeper
/// level is computed from the previous one.
pub fn encode_hier(tape: &Tape, image: &Tensor, enc: &HierEncoder) -> Result<[Tensor; 3]> {
    let g1 = apply_cellwise(tape, &enc.stages[0], &enc.stem.patchify(tape, image)?)?;
    let merged1 = apply_cellwise(
        tape,
        &enc.merges[0].mix,
        &g1.space_to_depth(enc.merges[0].block)?,
    )?;
    let g2 = apply_cellwise(tape, &enc.stages[1], &merged1)?;
    let merged2 = apply_cellwise(
        tape,
        &enc.merges[1].mix,
        &g2.space_to_depth(enc.merges[1].block)?,
    )?;
    let g3 = apply_cellwise(tape, &enc.stages[2], &merged2)?;
    Ok([g1, g2, g3])
}

/// Cellwise mixer plus unpatchify expansion back to image extents.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub mix: Fnn2,
    pub out: PatchMap,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Decoder {
        Decoder {
            mix: Fnn2::with_default_hidden("dec.mix", cfg.d_z, cfg.d_z, rng),
            out: PatchMap::for_unpatchify("dec.out", cfg.factors[2], 3, cfg.d_z, rng),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.mix.params();
        ps.extend(self.out.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.mix.params_mut();
        ps.extend(self.out.params_mut());
        ps
    }
}

/// Expands the level-3 straight-through composite back to an image.
pub fn decode(tape: &Tape, z_f3_ste: &Tensor, dec: &Decoder) -> Result<Tensor> {
    dec.out.unpatchify(tape, &apply_cellwise(tape, &dec.mix, z_f3_ste)?)
}

/// One training sample: image tensor, raw caption, and its granular
/// embedding bundle.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub caption: String,
    pub text: GranularText,
}

/// Level j of the hierarchy is aligned with this granularity.
pub fn granularity_for_level(level: usize) -> Granularity {
    GRANULARITIES[level]
}

/// Full trainable state plus the RNG that drives batch order and
/// sampling; checkpoints capture all of it.
#[derive(Debug)]
pub struct TrainState {
    pub cfg: ModelConfig,
    pub encoder: HierEncoder,
    pub decoder: Decoder,
    pub codebooks: Vec<Codebook>,
    pub heads: Vec<GaussianHead>,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

impl TrainState {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<TrainState> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x494e_4954));
        let encoder = HierEncoder::new(&cfg, &mut init_rng);
        let decoder = Decoder::new(&cfg, &mut init_rng);
        let codebooks = if cfg.per_level_codebooks {
            (1..=3)
                .map(|j| {
                    Codebook::new(&format!("codebook.f{j}.entries"), cfg.k, cfg.d_z, &mut init_rng)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![Codebook::new("codebook.entries", cfg.k, cfg.d_z, &mut init_rng)?]
        };
        let heads = (1..=3)
            .map(|j| GaussianHead::new(&format!("head.f{j}"), cfg.d_z, cfg.d_text, &mut init_rng))
            .collect();
        let adam = Adam::new(cfg.lr);
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5452_4149));
        Ok(TrainState {
            cfg,
            encoder,
            decoder,
            codebooks,
            heads,
            adam,
            step: 0,
            rng,
        })
    }

    pub fn codebook(&self, level: usize) -> &Codebook {
        if self.cfg.per_level_codebooks {
            &self.codebooks[level]
        } else {
            &self.codebooks[0]
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.encoder.params();
        ps.extend(self.decoder.params());
        for cb in &self.codebooks {
            ps.push(&cb.entries);
        }
        for h in &self.heads {
            ps.extend(h.params());
        }
        ps
    }
}

fn collect_params_mut<'a>(
    encoder: &'a mut HierEncoder,
    decoder: &'a mut Decoder,
    codebooks: &'a mut [Codebook],
    heads: &'a mut [GaussianHead],
) -> Vec<&'a mut Param> {
    let mut ps = encoder.params_mut();
    ps.extend(decoder.params_mut());
    for cb in codebooks.iter_mut() {
        ps.push(&mut cb.entries);
    }
    for h in heads.iter_mut() {
        ps.extend(h.params_mut());
    }
    ps
}

/// Captured stop-gradient values and randomness of one alignment call.
#[derive(Clone, Debug)]
pub struct AlignReplay {
    pub draws: AlignmentDraws,
    pub plan: DenseMatrix,
}

/// Captured per-image constants of one forward pass.
#[derive(Clone, Debug)]
pub struct ImageReplay {
    pub indices: Vec<Vec<usize>>,
    pub pre_q_frozen: Vec<Tensor>,
    pub quantized_frozen: Vec<Tensor>,
    pub align: Vec<AlignReplay>,
}

/// Captured constants of a whole batch step.
#[derive(Clone, Debug, Default)]
pub struct StepReplay {
    pub images: Vec<ImageReplay>,
}

pub enum ForwardMode<'a> {
    Fresh(&'a mut ChaCha8Rng),
    Replay(&'a StepReplay),
}

/// Scalar losses of one batch, still attached to the tape.
pub struct BatchLosses {
    pub total: Tensor,
    pub l_vq: Tensor,
    pub l_w: Tensor,
    pub l_p: Tensor,
    pub l_s: Tensor,
    pub recon_mse: f64,
    /// Per level: indices of every cell across the whole batch.
    pub level_indices: Vec<Vec<usize>>,
}

struct LevelForward {
    pre_q: Tensor,
    quantized: Tensor,
    ste: Tensor,
    indices: Vec<usize>,
}

fn codebook_for<'a>(cfg: &ModelConfig, codebooks: &'a [Codebook], level: usize) -> &'a Codebook {
    if cfg.per_level_codebooks {
        &codebooks[level]
    } else {
        &codebooks[0]
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_image(
    tape: &Tape,
    sample: &Sample,
    encoder: &HierEncoder,
    decoder: &Decoder,
    codebooks: &[Codebook],
    heads: &[GaussianHead],
    cfg: &ModelConfig,
    mode: &mut ForwardMode<'_>,
    replay_image: Option<&ImageReplay>,
) -> Result<(Tensor, Tensor, Tensor, Tensor, f64, Vec<Vec<usize>>, ImageReplay)> {
    let grids = encode_hier(tape, &sample.image, encoder).map_err(|e| e.in_term("encoder"))?;

    let mut levels = Vec::with_capacity(3);
    let mut capture = ImageReplay {
        indices: Vec::new(),
        pre_q_frozen: Vec::new(),
        quantized_frozen: Vec::new(),
        align: Vec::new(),
    };
    for (level, pre_q) in grids.into_iter().enumerate() {
        let cb = codebook_for(cfg, codebooks, level);
        let term = format!("quantize level f{}", encoder.factors[level]);
        let indices = match replay_image {
            Some(r) => r.indices[level].clone(),
            None => nearest_indices(&pre_q, cb).map_err(|e| e.in_term(term.clone()))?,
        };
        let q = quantize_with_indices(tape, &pre_q, cb, indices.clone())
            .map_err(|e| e.in_term(term))?;
        let ste = match replay_image {
            Some(r) => {
                let residual = r.quantized_frozen[level].sub(&r.pre_q_frozen[level])?;
                pre_q.add(&residual)?
            }
            None => q.ste.clone(),
        };
        capture.indices.push(indices.clone());
        capture.pre_q_frozen.push(pre_q.detach());
        capture.quantized_frozen.push(q.quantized.detach());
        levels.push(LevelForward {
            pre_q,
            quantized: q.quantized,
            ste,
            indices,
        });
    }

    let recon = decode(tape, &levels[2].ste, decoder).map_err(|e| e.in_term("reconstruction"))?;
    let recon_term = mse(&sample.image, &recon).map_err(|e| e.in_term("reconstruction"))?;
    let recon_value = recon_term.scalar_value()?;

    let mut l_vq = recon_term;
    for (level, lf) in levels.iter().enumerate() {
        if !cfg.quant_terms_all_levels && level != 2 {
            continue;
        }
        let (codebook_term, commit_term) = match replay_image {
            Some(r) => (
                mse(&r.pre_q_frozen[level], &lf.quantized)?,
                mse(&lf.pre_q, &r.quantized_frozen[level])?,
            ),
            None => (
                mse(&lf.pre_q.detach(), &lf.quantized)?,
                mse(&lf.pre_q, &lf.quantized.detach())?,
            ),
        };
        l_vq = l_vq
            .add(&codebook_term)?
            .add(&commit_term.scale(cfg.commit_coeff)?)
            .map_err(|e| e.in_term("l_vq"))?;
    }

    let mut align_losses = Vec::with_capacity(3);
    for (level, lf) in levels.iter().enumerate() {
        let granularity = granularity_for_level(level);
        let units = sample.text.embeddings(granularity);
        let term = match granularity {
            Granularity::Word => "l_w",
            Granularity::Phrase => "l_p",
            Granularity::Sentence => "l_s",
        };
        let out = match (&mut *mode, replay_image) {
            (_, Some(r)) => granularity_loss_replay(
                tape,
                &lf.quantized,
                &units,
                &heads[level],
                &cfg.align,
                &r.align[level].draws,
                Some(&r.align[level].plan),
            ),
            (ForwardMode::Fresh(rng), None) => {
                granularity_loss(tape, &lf.quantized, &units, &heads[level], &cfg.align, rng)
            }
            (ForwardMode::Replay(_), None) => unreachable!("replay without captured image"),
        }
        .map_err(|e| e.in_term(term))?;
        capture.align.push(AlignReplay {
            draws: out.draws.clone(),
            plan: out.transport.plan.clone(),
        });
        align_losses.push(out.loss);
    }

    let indices = levels.iter().map(|l| l.indices.clone()).collect();
    let mut it = align_losses.into_iter();
    let (l_w, l_p, l_s) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok((l_vq, l_w, l_p, l_s, recon_value, indices, capture))
}

/// Runs the full objective over a batch. In `Fresh` mode the returned
/// [`StepReplay`] captures everything needed to re-run the identical
/// smooth objective; in `Replay` mode it echoes the given capture.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch(
    tape: &Tape,
    encoder: &HierEncoder,
    decoder: &Decoder,
    codebooks: &[Codebook],
    heads: &[GaussianHead],
    cfg: &ModelConfig,
    batch: &[&Sample],
    mut mode: ForwardMode<'_>,
) -> Result<(BatchLosses, StepReplay)> {
    if batch.is_empty() {
        return Err(Error::Empty { what: "batch" });
    }
    for (i, s) in batch.iter().enumerate() {
        for g in GRANULARITIES {
            if s.text.units(g).is_empty() {
                return Err(Error::Config(format!(
                    "batch sample {i} has an empty {g:?} granularity: {:?}",
                    s.caption
                )));
            }
        }
    }

    let mut vq_terms = Vec::new();
    let mut w_terms = Vec::new();
    let mut p_terms = Vec::new();
    let mut s_terms = Vec::new();
    let mut recon_sum = 0.0;
    let mut level_indices: Vec<Vec<usize>> = vec![Vec::new(); 3];
    let mut capture = StepReplay::default();

    for (i, sample) in batch.iter().enumerate() {
        let replay_image = match &mode {
            ForwardMode::Replay(r) => Some(&r.images[i]),
            ForwardMode::Fresh(_) => None,
        };
        // Split the borrow: replay_image borrows from mode only in Replay
        // mode, where forward_image never touches the rng.
        let replay_image = replay_image.cloned();
        let (l_vq, l_w, l_p, l_s, recon, indices, img_capture) = forward_image(
            tape,
            sample,
            encoder,
            decoder,
            codebooks,
            heads,
            cfg,
            &mut mode,
            replay_image.as_ref(),
        )?;
        vq_terms.push(l_vq);
        w_terms.push(l_w);
        p_terms.push(l_p);
        s_terms.push(l_s);
        recon_sum += recon;
        for (level, idx) in indices.into_iter().enumerate() {
            level_indices[level].extend(idx);
        }
        capture.images.push(img_capture);
    }

    let mean_of = |terms: &[Tensor]| -> Result<Tensor> { Tensor::concat(terms)?.mean_all() };
    let l_vq = mean_of(&vq_terms).map_err(|e| e.in_term("l_vq"))?;
    let l_w = mean_of(&w_terms).map_err(|e| e.in_term("l_w"))?;
    let l_p = mean_of(&p_terms).map_err(|e| e.in_term("l_p"))?;
    let l_s = mean_of(&s_terms).map_err(|e| e.in_term("l_s"))?;
    let total = total_loss(&l_vq, &l_w, &l_p, &l_s, &cfg.align).map_err(|e| e.in_term("total"))?;

    Ok((
        BatchLosses {
            total,
            l_vq,
            l_w,
            l_p,
            l_s,
            recon_mse: recon_sum / batch.len() as f64,
            level_indices,
        },
        capture,
    ))
}

/// One metrics record per training step.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub l_vq: f64,
    pub l_w: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub recon_mse: f64,
    pub perplexity: [f64; 3],
    pub step_ms: f64,
}

/// Forward, backward, and one optimizer update over a batch.
pub fn train_step(state: &mut TrainState, batch: &[&Sample]) -> Result<StepMetrics> {
    let start = Instant::now();
    let tape = Tape::new();
    let TrainState {
        cfg,
        encoder,
        decoder,
        codebooks,
        heads,
        adam,
        rng,
        step,
    } = state;

    let (losses, _) = forward_batch(
        &tape,
        encoder,
        decoder,
        codebooks,
        heads,
        cfg,
        batch,
        ForwardMode::Fresh(rng),
    )?;
    let grads = losses.total.backward()?;
    let mut params = collect_params_mut(encoder, decoder, codebooks, heads);
    adam.step(&mut params, &grads)?;
    *step += 1;

    let k = cfg.k;
    let mut perplexity = [0.0; 3];
    for level in 0..3 {
        perplexity[level] = codebook_metrics(&losses.level_indices[level], k)?.perplexity;
    }
    Ok(StepMetrics {
        step: *step,
        total: losses.total.scalar_value()?,
        l_vq: losses.l_vq.scalar_value()?,
        l_w: losses.l_w.scalar_value()?,
        l_p: losses.l_p.scalar_value()?,
        l_s: losses.l_s.scalar_value()?,
        recon_mse: losses.recon_mse,
        perplexity,
        step_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Encode, quantize, and reconstruct one image without training.
pub fn reconstruct(state: &TrainState, image: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let tape = Tape::new();
    let grids = encode_hier(&tape, image, &state.encoder)?;
    let mut indices = Vec::with_capacity(3);
    let mut ste3 = None;
    for (level, pre_q) in grids.into_iter().enumerate() {
        let cb = state.codebook(level);
        let idx = nearest_indices(&pre_q, cb)?;
        let q = quantize_with_indices(&tape, &pre_q, cb, idx.clone())?;
        indices.push(idx);
        if level == 2 {
            ste3 = Some(q.ste);
        }
    }
    let recon = decode(&tape, &ste3.expect("three levels"), &state.decoder)?;
    Ok((recon.detach(), indices))
}

/// Mean over all granularities and text units of the best cosine match
/// between the unit embedding and any codebook entry projected through
/// that granularity's prediction net. In [-1, 1].
pub fn codebook_text_similarity(state: &TrainState, texts: &[GranularText]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Empty { what: "caption set" });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (level, granularity) in GRANULARITIES.iter().enumerate() {
        let tape = Tape::new();
        let cb = state.codebook(level);
        let entries = cb.entries.attach(&tape);
        let projected = state.heads[level].pred_net.apply_rows(&tape, &entries)?;
        let proj = projected.data();
        let d = state.cfg.d_text;
        for text in texts {
            for unit in text.units(*granularity) {
                let mut best = f64::NEG_INFINITY;
                for kk in 0..cb.k {
                    let row = &proj[kk * d..(kk + 1) * d];
                    best = best.max(cosine(row, &unit.embedding));
                }
                sum += best;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty { what: "text units" });
    }
    Ok(sum / count as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub mod checkpoint {
    //! A checkpoint directory holds `manifest.tsv` (name, shape, byte
    //! offset per tensor), `tensors.bin` (concatenated raw tensor
    //! records), and `state.json` (step counter, optimizer step, rng
    //! state). Loads reject shape mismatches.

    use super::*;
    use crate::tensor::{read_tensor, write_tensor};
    use serde::{Deserialize, Serialize};
    use std::io::{Seek, SeekFrom, Write};

    #[derive(Serialize, Deserialize)]
    struct MetaState {
        step: u64,
        adam_step: u64,
        lr: f64,
        rng_seed: String,
        rng_word_pos: String,
        rng_stream: u64,
    }

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn unhex(s: &str) -> Result<Vec<u8>> {
        if s.len() % 2 != 0 {
            return Err(Error::Config("odd hex length in checkpoint".to_string()));
        }
        (0..s.len() / 2)
            .map(|i| {
                u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                    .map_err(|e| Error::Config(format!("bad hex in checkpoint: {e}")))
            })
            .collect()
    }

    pub fn save(state: &TrainState, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut blob = std::fs::File::create(dir.join("tensors.bin"))?;
        let mut manifest = String::new();
        let mut write_entry = |name: &str, t: &Tensor, blob: &mut std::fs::File| -> Result<()> {
            let offset = blob.stream_position()?;
            write_tensor(blob, t)?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name}\t{}\t{offset}\n", dims.join("x")));
            Ok(())
        };
        for p in state.params() {
            write_entry(p.name(), p.value(), &mut blob)?;
            let n = p.value().numel();
            let (m, v) = match state.adam.moments(p.id()) {
                Some((m, v)) => (m.to_vec(), v.to_vec()),
                None => (vec![0.0; n], vec![0.0; n]),
            };
            let shape = p.value().shape().to_vec();
            write_entry(
                &format!("opt.m.{}", p.name()),
                &Tensor::new(shape.clone(), m)?,
                &mut blob,
            )?;
            write_entry(
                &format!("opt.v.{}", p.name()),
                &Tensor::new(shape, v)?,
                &mut blob,
            )?;
        }
        blob.flush()?;
        std::fs::write(dir.join("manifest.tsv"), manifest)?;

        let meta = MetaState {
            step: state.step,
            adam_step: state.adam.step_count(),
            lr: state.adam.lr,
            rng_seed: hex(&state.rng.get_seed()),
            rng_word_pos: state.rng.get_word_pos().to_string(),
            rng_stream: state.rng.get_stream(),
        };
        std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    fn read_manifest(dir: &Path) -> Result<Vec<(String, Vec<usize>, u64)>> {
        let text = std::fs::read_to_string(dir.join("manifest.tsv"))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (name, dims, offset) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(Error::Parse {
                        what: "checkpoint manifest",
                        line: lineno + 1,
                        details: line.to_string(),
                    })
                }
            };
            let shape: std::result::Result<Vec<usize>, _> = if dims.is_empty() {
                Ok(vec![])
            } else {
                dims.split('x').map(|d| d.parse::<usize>()).collect()
            };
            let shape = shape.map_err(|e| Error::Parse {
                what: "checkpoint manifest",
                line: lineno + 1,
                details: e.to_string(),
            })?;
            let offset: u64 = offset.parse().map_err(|e| Error::Parse {
                what: "checkpoint manifest",
                line: lineno + 1,
                details: format!("{e}"),
            })?;
            entries.push((name.to_string(), shape, offset));
        }
        Ok(entries)
    }

    pub fn load(cfg: ModelConfig, dir: &Path) -> Result<TrainState> {
        let mut state = TrainState::new(cfg, 0)?;
        let entries = read_manifest(dir)?;
        let mut blob = std::fs::File::open(dir.join("tensors.bin"))?;
        let mut lookup = std::collections::HashMap::new();
        for (name, shape, offset) in &entries {
            lookup.insert(name.clone(), (shape.clone(), *offset));
        }

        let read_at = |name: &str, expected: &[usize], blob: &mut std::fs::File| -> Result<Tensor> {
            let (shape, offset) = lookup
                .get(name)
                .ok_or_else(|| Error::CheckpointMissing(name.to_string()))?;
            if shape != expected {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: shape.clone(),
                });
            }
            blob.seek(SeekFrom::Start(*offset))?;
            let t = read_tensor(blob)?;
            if t.shape() != expected {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t)
        };

        // Borrow dance: collect (name, id, shape) first, then fill values.
        let param_info: Vec<(String, crate::tensor::ParamId, Vec<usize>)> = state
            .params()
            .iter()
            .map(|p| (p.name().to_string(), p.id(), p.value().shape().to_vec()))
            .collect();
        for (name, id, shape) in &param_info {
            let value = read_at(name, shape, &mut blob)?;
            let m = read_at(&format!("opt.m.{name}"), shape, &mut blob)?;
            let v = read_at(&format!("opt.v.{name}"), shape, &mut blob)?;
            let TrainState {
                encoder,
                decoder,
                codebooks,
                heads,
                adam,
                ..
            } = &mut state;
            let mut params = collect_params_mut(encoder, decoder, codebooks, heads);
            let p = params
                .iter_mut()
                .find(|p| p.id() == *id)
                .expect("param ids are stable");
            p.set_value(value)?;
            adam.set_moments(*id, m.data().to_vec(), v.data().to_vec());
        }

        let meta: MetaState =
            serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
        state.step = meta.step;
        state.adam.set_step_count(meta.adam_step);
        state.adam.lr = meta.lr;
        let seed_bytes = unhex(&meta.rng_seed)?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| Error::Config("rng seed must be 32 bytes".to_string()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng_stream);
        let word_pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|e| Error::Config(format!("bad rng position: {e}")))?;
        rng.set_word_pos(word_pos);
        state.rng = rng;
        Ok(state)
    }
}
