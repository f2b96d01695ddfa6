//! Sampling-based alignment between a quantized code grid and one text
//! granularity.
//!
//! The grid is summarized as a diagonal Gaussian (mean cell feature
//! through two small nets), `q` reparameterized samples are projected
//! into text space, `q` targets are drawn from the unit set, and the
//! loss is the entropic transport cost between the two point clouds
//! under the pairwise Euclidean ground cost. The transport plan is
//! detached: the gradient of the regularized transport cost with
//! respect to the cost matrix is the optimal plan itself, so holding
//! the plan constant gives the correct first-order signal without
//! differentiating through the solver iterations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Fnn2, Param};
use crate::tensor::{Tape, Tensor};
use crate::transport::{sinkhorn, DenseMatrix, TransportInstance, TransportResult};

/// Per-granularity heads: `mu_net`/`sigma_net` parameterize the
/// Gaussian over the grid summary, `pred_net` maps samples into text
/// space. The covariance is diagonal and strictly positive (exp of the
/// sigma net output).
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mu_net: Fnn2,
    pub sigma_net: Fnn2,
    pub pred_net: Fnn2,
}

impl GaussianHead {
    pub fn new(prefix: &str, d_z: usize, d_text: usize, rng: &mut ChaCha8Rng) -> GaussianHead {
        GaussianHead {
            mu_net: Fnn2::with_default_hidden(&format!("{prefix}.mu"), d_z, d_z, rng),
            sigma_net: Fnn2::with_default_hidden(&format!("{prefix}.sigma"), d_z, d_z, rng),
            pred_net: Fnn2::with_default_hidden(&format!("{prefix}.pred"), d_z, d_text, rng),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.mu_net.params();
        ps.extend(self.sigma_net.params());
        ps.extend(self.pred_net.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.mu_net.params_mut();
        ps.extend(self.sigma_net.params_mut());
        ps.extend(self.pred_net.params_mut());
        ps
    }
}

/// Loss weights, sample count, and solver knobs for the alignment
/// losses. `eps_rel` scales with the mean of each cost matrix.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentConfig {
    pub q: usize,
    pub eps_rel: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub alpha: f64,
    pub beta_p: f64,
    pub gamma_s: f64,
    /// Align against every unit instead of sampling q of them
    /// (the sample count then equals the unit count).
    pub full_set: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            q: 8,
            eps_rel: 0.05,
            tol: 1e-6,
            max_iter: 1000,
            alpha: 0.001,
            beta_p: 0.001,
            gamma_s: 0.001,
            full_set: false,
        }
    }
}

/// Summarizes a quantized grid as a diagonal Gaussian: `m` is the
/// spatial mean cell, `mu = mu_net(m)`, `sigma_diag = exp(sigma_net(m))`.
pub fn gaussian_head(
    tape: &Tape,
    grid: &Tensor,
    head: &GaussianHead,
) -> Result<(Tensor, Tensor)> {
    if grid.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "gaussian_head",
            details: format!("rank-3 grid required, got {:?}", grid.shape()),
        });
    }
    let (h, w, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let m = grid.reshape(&[h * w, d])?.mean_axis(0)?;
    let mu = head.mu_net.apply(tape, &m)?;
    let sigma_diag = head.sigma_net.apply(tape, &m)?.exp()?;
    Ok((mu, sigma_diag))
}

/// Standard-normal draws for `q` reparameterized samples.
pub fn draw_noise(q: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..q)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// `xi_i = mu + sqrt(sigma_diag) * eta_i` for the given noise rows;
/// differentiable with respect to both `mu` and `sigma_diag`.
pub fn sample_gaussian_with(
    mu: &Tensor,
    sigma_diag: &Tensor,
    noise: &[Vec<f64>],
) -> Result<Tensor> {
    if noise.is_empty() {
        return Err(Error::Empty { what: "sample count" });
    }
    let d = mu.numel();
    let std = sigma_diag.sqrt()?;
    let mut rows = Vec::with_capacity(noise.len());
    for eta in noise {
        let eta_t = Tensor::new(vec![d], eta.clone())?;
        rows.push(mu.add(&std.mul(&eta_t)?)?);
    }
    Tensor::concat(&rows)?.reshape(&[noise.len(), d])
}

/// Reparameterized sampling: q draws from N(mu, diag(sigma_diag)).
pub fn sample_gaussian(
    mu: &Tensor,
    sigma_diag: &Tensor,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if q < 1 {
        return Err(Error::Empty { what: "sample count" });
    }
    let noise = draw_noise(q, mu.numel(), rng);
    sample_gaussian_with(mu, sigma_diag, &noise)
}

/// Uniform draws with replacement from the unit set; each returned
/// index selects a member of `units`.
pub fn sample_target_indices(
    n_units: usize,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if n_units == 0 {
        return Err(Error::Empty { what: "unit set" });
    }
    Ok((0..q).map(|_| rng.gen_range(0..n_units)).collect())
}

/// The uniform Dirac-mixture draw over unit embeddings.
pub fn sample_targets(
    units: &[Vec<f64>],
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let idx = sample_target_indices(units.len(), q, rng)?;
    Ok(idx.into_iter().map(|i| units[i].clone()).collect())
}

/// Frozen randomness of one alignment loss evaluation, enough to replay
/// the computation exactly.
#[derive(Clone, Debug)]
pub struct AlignmentDraws {
    pub noise: Vec<Vec<f64>>,
    pub target_idx: Vec<usize>,
}

/// One granularity's alignment loss with its transport diagnostics.
#[derive(Debug)]
pub struct GranularityLoss {
    pub loss: Tensor,
    pub transport: TransportResult,
    pub draws: AlignmentDraws,
}

/// Alignment loss between a quantized grid and a set of unit
/// embeddings. Fresh randomness is drawn from `rng`; see
/// [`granularity_loss_replay`] for the deterministic core.
pub fn granularity_loss(
    tape: &Tape,
    grid: &Tensor,
    units: &[Vec<f64>],
    head: &GaussianHead,
    cfg: &AlignmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GranularityLoss> {
    if units.is_empty() {
        return Err(Error::Empty { what: "unit set" });
    }
    let q = if cfg.full_set {
        units.len()
    } else {
        cfg.q.max(1)
    };
    let d_z = grid.shape()[grid.shape().len() - 1];
    let draws = AlignmentDraws {
        noise: draw_noise(q, d_z, rng),
        target_idx: if cfg.full_set {
            (0..units.len()).collect()
        } else {
            sample_target_indices(units.len(), q, rng)?
        },
    };
    granularity_loss_replay(tape, grid, units, head, cfg, &draws, None)
}

/// Deterministic alignment loss under fixed draws, optionally under a
/// fixed transport plan. Gradient flows through the cost matrix into
/// `pred_net`, `mu_net`, `sigma_net`, and the codebook entries selected
/// in the grid; the plan is a constant.
pub fn granularity_loss_replay(
    tape: &Tape,
    grid: &Tensor,
    units: &[Vec<f64>],
    head: &GaussianHead,
    cfg: &AlignmentConfig,
    draws: &AlignmentDraws,
    plan_override: Option<&DenseMatrix>,
) -> Result<GranularityLoss> {
    if units.is_empty() {
        return Err(Error::Empty { what: "unit set" });
    }
    let q = draws.noise.len();
    if q == 0 || draws.target_idx.len() != q {
        return Err(Error::ShapeMismatch {
            op: "granularity_loss",
            details: format!(
                "noise rows {} vs target draws {}",
                q,
                draws.target_idx.len()
            ),
        });
    }
    let (mu, sigma_diag) = gaussian_head(tape, grid, head)?;
    let xi = sample_gaussian_with(&mu, &sigma_diag, &draws.noise)?;
    let predicted = head.pred_net.apply_rows(tape, &xi)?;

    // gamma_ij = || y_pre_i - y_tar_j ||_2, as graph nodes.
    let mut cost_nodes = Vec::with_capacity(q * q);
    let mut cost_values = Vec::with_capacity(q * q);
    for i in 0..q {
        let yi = predicted.row(i)?;
        for &tj in &draws.target_idx {
            let target = Tensor::new(vec![units[tj].len()], units[tj].clone())?;
            let dist = yi.sub(&target)?.l2_norm()?;
            cost_values.push(dist.scalar_value()?);
            cost_nodes.push(dist);
        }
    }
    let cost = DenseMatrix::from_flat(q, q, cost_values)?;

    let plan = match plan_override {
        Some(p) => {
            if p.rows() != q || p.cols() != q {
                return Err(Error::ShapeMismatch {
                    op: "granularity_loss",
                    details: format!("plan {}x{} vs q {}", p.rows(), p.cols(), q),
                });
            }
            TransportResult {
                plan: p.clone(),
                cost: 0.0,
                iterations: 0,
                converged: true,
            }
        }
        None => {
            let marginal = vec![1.0 / q as f64; q];
            let inst = TransportInstance::new(marginal.clone(), marginal, cost)?;
            let eps = (cfg.eps_rel * inst.cost.mean()).max(1e-12);
            let result = sinkhorn(&inst, eps, cfg.tol, cfg.max_iter)?;
            if !result.converged {
                log::warn!(
                    "sinkhorn did not converge in {} iterations (q = {q}); using last iterate",
                    result.iterations
                );
            }
            result
        }
    };

    // loss = <gamma, F*> with F* constant.
    let gamma = Tensor::concat(&cost_nodes)?;
    let plan_flat = Tensor::new(vec![q * q], plan.plan.data().to_vec())?;
    let loss = gamma.mul(&plan_flat)?.sum_all()?;

    Ok(GranularityLoss {
        loss,
        transport: plan,
        draws: draws.clone(),
    })
}

/// Overall objective: `l_vq + alpha*l_w + beta_p*l_p + gamma_s*l_s`.
pub fn total_loss(
    l_vq: &Tensor,
    l_w: &Tensor,
    l_p: &Tensor,
    l_s: &Tensor,
    cfg: &AlignmentConfig,
) -> Result<Tensor> {
    for (name, t) in [("l_vq", l_vq), ("l_w", l_w), ("l_p", l_p), ("l_s", l_s)] {
        if t.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "total_loss",
                details: format!("{name} is not scalar: {:?}", t.shape()),
            });
        }
    }
    l_vq.add(&l_w.scale(cfg.alpha)?)?
        .add(&l_p.scale(cfg.beta_p)?)?
        .add(&l_s.scale(cfg.gamma_s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use crate::tensor::finite_diff_grad;
    use crate::transport::emd_exact;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_head(d_z: usize, d: usize) -> GaussianHead {
        let mut head = GaussianHead::new("head.t", d_z, d, &mut rng(0));
        for p in head.params_mut() {
            let z = Tensor::zeros(p.value().shape());
            p.set_value(z).unwrap();
        }
        head
    }

    #[test]
    fn zero_nets_give_zero_mean_unit_variance() {
        let head = zero_head(3, 3);
        let tape = Tape::new();
        let grid = Tensor::new(vec![2, 2, 3], vec![0.5; 12]).unwrap();
        let (mu, sigma) = gaussian_head(&tape, &grid, &head).unwrap();
        assert_eq!(mu.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(sigma.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigma_diag_always_positive() {
        let mut r = rng(5);
        for seed in 0..10 {
            let head = GaussianHead::new("head.t", 4, 4, &mut rng(seed));
            let grid_data: Vec<f64> = (0..2 * 2 * 4).map(|_| r.gen_range(-3.0..3.0)).collect();
            let grid = Tensor::new(vec![2, 2, 4], grid_data).unwrap();
            let tape = Tape::new();
            let (_, sigma) = gaussian_head(&tape, &grid, &head).unwrap();
            assert!(sigma.data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn constant_grid_mean_is_the_cell() {
        let head = zero_head(2, 2);
        let _tape = Tape::new();
        let cell = [0.7, -1.2];
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend_from_slice(&cell);
        }
        let grid = Tensor::new(vec![2, 3, 2], data).unwrap();
        // mu_net is zero, so check the mean through the sigma path:
        // reconstruct m by a one-layer identity net instead.
        let (h, w, d) = (2, 3, 2);
        let m = grid
            .reshape(&[h * w, d])
            .unwrap()
            .mean_axis(0)
            .unwrap();
        assert!((m.data()[0] - cell[0]).abs() < 1e-15);
        assert!((m.data()[1] - cell[1]).abs() < 1e-15);
        let _ = head;
    }

    #[test]
    fn degenerate_gaussian_collapses_to_mu() {
        let mu = Tensor::new(vec![2], vec![0.3, -0.8]).unwrap();
        let sigma = Tensor::new(vec![2], vec![(-30.0f64).exp(), (-30.0f64).exp()]).unwrap();
        let samples = sample_gaussian(&mu, &sigma, 5, &mut rng(1)).unwrap();
        for row in 0..5 {
            for i in 0..2 {
                assert!((samples.data()[row * 2 + i] - mu.data()[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let mu = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let sigma = Tensor::new(vec![3], vec![1.0, 2.0, 0.5]).unwrap();
        let a = sample_gaussian(&mu, &sigma, 4, &mut rng(9)).unwrap();
        let b = sample_gaussian(&mu, &sigma, 4, &mut rng(9)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(matches!(
            sample_gaussian(&mu, &sigma, 0, &mut rng(9)),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn sample_mean_approaches_mu() {
        let mu = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let sigma = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let samples = sample_gaussian(&mu, &sigma, 10_000, &mut rng(12)).unwrap();
        for i in 0..3 {
            let mean: f64 =
                (0..10_000).map(|r| samples.data()[r * 3 + i]).sum::<f64>() / 10_000.0;
            assert!(mean.abs() < 0.05, "coordinate {i}: {mean}");
        }
    }

    #[test]
    fn single_unit_forces_all_targets() {
        let units = vec![vec![1.0, 2.0]];
        let t = sample_targets(&units, 6, &mut rng(3)).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.iter().all(|v| v == &units[0]));
        assert!(matches!(
            sample_targets(&[], 3, &mut rng(3)),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn target_multiset_is_reproducible() {
        let units: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let a = sample_target_indices(4, 4, &mut rng(7)).unwrap();
        let b = sample_target_indices(4, 4, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&i| i < units.len()));
    }

    #[test]
    fn target_frequencies_are_uniform() {
        let mut counts = [0usize; 4];
        for i in sample_target_indices(4, 100_000, &mut rng(21)).unwrap() {
            counts[i] += 1;
        }
        for c in counts {
            let freq = c as f64 / 100_000.0;
            assert!((freq - 0.25).abs() < 0.01, "freq {freq}");
        }
    }

    fn toy_grid(d: usize) -> Tensor {
        let mut data = Vec::new();
        for c in 0..4 {
            for i in 0..d {
                data.push(0.1 * c as f64 - 0.05 * i as f64);
            }
        }
        Tensor::new(vec![2, 2, d], data).unwrap()
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        // pred_net output constant u (zero weights, bias u), single unit u.
        let d = 3;
        let u = vec![0.4, -0.2, 0.9];
        let mut head = zero_head(d, d);
        head.pred_net
            .b2
            .set_value(Tensor::new(vec![d], u.clone()).unwrap())
            .unwrap();
        let tape = Tape::new();
        let cfg = AlignmentConfig {
            q: 3,
            ..Default::default()
        };
        let out = granularity_loss(&tape, &toy_grid(d), &[u], &head, &cfg, &mut rng(2)).unwrap();
        assert_eq!(out.loss.scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn q1_loss_is_the_pairwise_distance() {
        let d = 2;
        let head = GaussianHead::new("head.t", d, d, &mut rng(31));
        let unit = vec![0.3, 0.8];
        let cfg = AlignmentConfig {
            q: 1,
            ..Default::default()
        };
        let tape = Tape::new();
        let out =
            granularity_loss(&tape, &toy_grid(d), &[unit.clone()], &head, &cfg, &mut rng(4))
                .unwrap();

        // Recompute the single pair by hand.
        let tape2 = Tape::new();
        let (mu, sigma) = gaussian_head(&tape2, &toy_grid(d), &head).unwrap();
        let xi = sample_gaussian_with(&mu, &sigma, &out.draws.noise).unwrap();
        let pred = head.pred_net.apply_rows(&tape2, &xi).unwrap();
        let dist: f64 = pred
            .data()
            .iter()
            .zip(&unit)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((out.loss.scalar_value().unwrap() - dist).abs() < 1e-12);
    }

    #[test]
    fn q2_loss_matches_exact_transport_oracle() {
        let d = 2;
        let head = GaussianHead::new("head.t", d, d, &mut rng(55));
        let units = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cfg = AlignmentConfig {
            q: 2,
            eps_rel: 0.0005,
            tol: 1e-10,
            max_iter: 200_000,
            ..Default::default()
        };
        let tape = Tape::new();
        let out = granularity_loss(&tape, &toy_grid(d), &units, &head, &cfg, &mut rng(6)).unwrap();

        // Rebuild the 2x2 cost and solve exactly.
        let tape2 = Tape::new();
        let (mu, sigma) = gaussian_head(&tape2, &toy_grid(d), &head).unwrap();
        let xi = sample_gaussian_with(&mu, &sigma, &out.draws.noise).unwrap();
        let pred = head.pred_net.apply_rows(&tape2, &xi).unwrap();
        let mut cost = vec![vec![0.0; 2]; 2];
        for i in 0..2 {
            for (jslot, &tj) in out.draws.target_idx.iter().enumerate() {
                let dist: f64 = (0..d)
                    .map(|k| (pred.data()[i * d + k] - units[tj][k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                cost[i][jslot] = dist;
            }
        }
        let inst = TransportInstance::new(
            vec![0.5, 0.5],
            vec![0.5, 0.5],
            DenseMatrix::from_rows(&cost).unwrap(),
        )
        .unwrap();
        let exact = emd_exact(&inst).unwrap();
        let rel = (out.loss.scalar_value().unwrap() - exact.cost).abs() / exact.cost;
        assert!(rel < 1e-3, "rel {rel}");
    }

    #[test]
    fn loss_is_non_negative() {
        let d = 3;
        for seed in 0..10 {
            let head = GaussianHead::new("head.t", d, d, &mut rng(seed));
            let units: Vec<Vec<f64>> = (0..3)
                .map(|i| (0..d).map(|j| ((i * d + j) as f64).sin()).collect())
                .collect();
            let tape = Tape::new();
            let cfg = AlignmentConfig::default();
            let out =
                granularity_loss(&tape, &toy_grid(d), &units, &head, &cfg, &mut rng(seed + 100))
                    .unwrap();
            assert!(out.loss.scalar_value().unwrap() >= 0.0);
        }
    }

    #[test]
    fn detached_plan_gradients_match_finite_differences() {
        let d = 3;
        let head = GaussianHead::new("head.t", d, d, &mut rng(77));
        let units: Vec<Vec<f64>> = (0..2)
            .map(|i| (0..d).map(|j| 0.3 * (i as f64) - 0.1 * j as f64).collect())
            .collect();
        let cfg = AlignmentConfig {
            q: 2,
            ..Default::default()
        };

        // Capture draws and plan once.
        let tape = Tape::new();
        let grid_param = Param::new("grid", toy_grid(d));
        let grid = grid_param.attach(&tape);
        let out = granularity_loss(&tape, &grid, &units, &head, &cfg, &mut rng(8)).unwrap();
        let plan = out.transport.plan.clone();
        let draws = out.draws.clone();
        let grads = out.loss.backward().unwrap();

        // Finite differences of the fixed-plan objective over the grid.
        let fd = finite_diff_grad(
            |g: &Tensor| {
                let t = Tape::new();
                let out =
                    granularity_loss_replay(&t, g, &units, &head, &cfg, &draws, Some(&plan))?;
                Ok(out.loss.detach())
            },
            grid_param.value(),
            1e-5,
        )
        .unwrap();
        let got = grads.get(grid_param.id()).unwrap();
        for (a, b) in got.data().iter().zip(fd.data()) {
            let denom = a.abs().max(b.abs()).max(1.0);
            assert!(((a - b) / denom).abs() < 1e-4, "{a} vs {b}");
        }

        // Same check for a head parameter (pred_net W2).
        let fd_w2 = finite_diff_grad(
            |w: &Tensor| {
                let mut h2 = head.clone();
                h2.pred_net.w2.set_value(w.clone())?;
                let t = Tape::new();
                let out = granularity_loss_replay(
                    &t,
                    &toy_grid(d),
                    &units,
                    &h2,
                    &cfg,
                    &draws,
                    Some(&plan),
                )?;
                Ok(out.loss.detach())
            },
            head.pred_net.w2.value(),
            1e-5,
        )
        .unwrap();
        let tape3 = Tape::new();
        let out3 =
            granularity_loss_replay(&tape3, &toy_grid(d), &units, &head, &cfg, &draws, Some(&plan))
                .unwrap();
        let grads3 = out3.loss.backward().unwrap();
        let got_w2 = grads3.get(head.pred_net.w2.id()).unwrap();
        for (a, b) in got_w2.data().iter().zip(fd_w2.data()) {
            let denom = a.abs().max(b.abs()).max(1.0);
            assert!(((a - b) / denom).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_reaches_codebook_entries_through_quantized_grid() {
        use crate::vq::{quantize, Codebook};
        let d = 3;
        let mut r = rng(91);
        let cb = Codebook::new("codebook.entries", 6, d, &mut r).unwrap();
        let head = GaussianHead::new("head.t", d, d, &mut r);
        let units = vec![vec![1.0, -1.0, 0.5]];
        let tape = Tape::new();
        let grid_data: Vec<f64> = (0..2 * 2 * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let pre_q = tape.leaf(&Tensor::new(vec![2, 2, d], grid_data).unwrap());
        let q = quantize(&tape, &pre_q, &cb).unwrap();
        let cfg = AlignmentConfig::default();
        let out =
            granularity_loss(&tape, &q.quantized, &units, &head, &cfg, &mut rng(13)).unwrap();
        let grads = out.loss.backward().unwrap();
        let g = grads.get(cb.entries.id()).unwrap();
        let selected: std::collections::HashSet<usize> = q.indices.iter().copied().collect();
        let mut nonzero_selected = false;
        for k in 0..cb.k {
            let row = &g.data()[k * d..(k + 1) * d];
            let has_grad = row.iter().any(|&v| v != 0.0);
            if selected.contains(&k) {
                nonzero_selected |= has_grad;
            } else {
                assert!(!has_grad, "unselected entry {k} received gradient");
            }
        }
        assert!(nonzero_selected, "no selected entry received text gradient");
    }

    #[test]
    fn total_loss_weighting() {
        let l_vq = Tensor::scalar(2.0);
        let one = Tensor::scalar(1.0);
        let zero_cfg = AlignmentConfig {
            alpha: 0.0,
            beta_p: 0.0,
            gamma_s: 0.0,
            ..Default::default()
        };
        let t = total_loss(&l_vq, &one, &one, &one, &zero_cfg).unwrap();
        assert_eq!(t.scalar_value().unwrap().to_bits(), 2.0f64.to_bits());

        let paper_cfg = AlignmentConfig::default();
        let t = total_loss(&l_vq, &one, &one, &one, &paper_cfg).unwrap();
        assert!((t.scalar_value().unwrap() - 2.003).abs() < 1e-15);

        // Doubling gamma_s adds exactly c * l_s.
        let c = 0.25;
        let l_s = Tensor::scalar(1.5);
        let cfg1 = AlignmentConfig {
            alpha: 0.0,
            beta_p: 0.0,
            gamma_s: c,
            ..Default::default()
        };
        let cfg2 = AlignmentConfig {
            gamma_s: 2.0 * c,
            ..cfg1
        };
        let t1 = total_loss(&l_vq, &one, &one, &l_s, &cfg1).unwrap();
        let t2 = total_loss(&l_vq, &one, &one, &l_s, &cfg2).unwrap();
        assert!(
            (t2.scalar_value().unwrap() - t1.scalar_value().unwrap() - c * 1.5).abs() < 1e-12
        );
    }

    #[test]
    fn full_set_mode_uses_every_unit_once() {
        let d = 2;
        let head = GaussianHead::new("head.t", d, d, &mut rng(3));
        let units: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, -(i as f64)]).collect();
        let cfg = AlignmentConfig {
            q: 2,
            full_set: true,
            ..Default::default()
        };
        let tape = Tape::new();
        let out = granularity_loss(&tape, &toy_grid(d), &units, &head, &cfg, &mut rng(5)).unwrap();
        assert_eq!(out.draws.noise.len(), 5);
        assert_eq!(out.draws.target_idx, vec![0, 1, 2, 3, 4]);
    }
}
