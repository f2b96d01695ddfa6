//! Trainable parameters, the 2-layer feedforward block used throughout
//! the model, the patch projection, and the Adam optimizer.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{check_finite, GradMap, ParamId, Tape, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named, trainable tensor. The name is the stable checkpoint key
/// (dotted, e.g. `head.f3.mu.W1`); the id keys gradient maps and
/// optimizer state within a process.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Param {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Replaces the value, keeping identity. Shape changes and
    /// non-finite values are rejected.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::CheckpointShape {
                name: self.name.clone(),
                expected: self.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        check_finite(&format!("set {}", self.name), value.data())?;
        self.value = value.detach();
        Ok(())
    }

    /// Leaf tensor on `tape`; repeated attachment reuses the same node.
    pub fn attach(&self, tape: &Tape) -> Tensor {
        tape.param_leaf(self.id, &self.value)
    }
}

/// Weights ~ Uniform(-1/sqrt(d_in), +1/sqrt(d_in)), biases zero.
pub fn init_affine(
    prefix: &str,
    w_name: &str,
    b_name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> (Param, Param) {
    let bound = 1.0 / (d_in as f64).sqrt();
    let data = (0..d_in * d_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    let w = Param::new(
        format!("{prefix}.{w_name}"),
        Tensor::new(vec![d_in, d_out], data).expect("finite init"),
    );
    let b = Param::new(format!("{prefix}.{b_name}"), Tensor::zeros(&[d_out]));
    (w, b)
}

/// Two affine layers with a ReLU between them; the output layer has no
/// activation.
#[derive(Clone, Debug)]
pub struct Fnn2 {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    d_in: usize,
    d_hid: usize,
    d_out: usize,
}

impl Fnn2 {
    pub fn new(prefix: &str, d_in: usize, d_hid: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Fnn2 {
        let (w1, b1) = init_affine(prefix, "W1", "b1", d_in, d_hid, rng);
        let (w2, b2) = init_affine(prefix, "W2", "b2", d_hid, d_out, rng);
        Fnn2 {
            w1,
            b1,
            w2,
            b2,
            d_in,
            d_hid,
            d_out,
        }
    }

    /// Hidden width defaults to `max(d_in, d_out)`.
    pub fn with_default_hidden(prefix: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Fnn2 {
        Fnn2::new(prefix, d_in, d_in.max(d_out), d_out, rng)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_in, self.d_hid, self.d_out)
    }

    /// Applies the block to every row of an `[n, d_in]` matrix.
    pub fn apply_rows(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = x
            .matmul(&self.w1.attach(tape))?
            .add_row(&self.b1.attach(tape))?
            .relu()?;
        h.matmul(&self.w2.attach(tape))?
            .add_row(&self.b2.attach(tape))
    }

    /// Vector-in, vector-out convenience: `[d_in] -> [d_out]`.
    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "fnn2_apply",
                details: format!("expected rank-1 input, got {:?}", x.shape()),
            });
        }
        let out = self.apply_rows(tape, &x.reshape(&[1, x.numel()])?)?;
        out.reshape(&[self.d_out])
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Non-overlapping patch projection between image space and grid space.
///
/// `patchify` direction holds a `[p*p*channels, d_z]` projection; the
/// `unpatchify` direction holds the reverse shape.
#[derive(Clone, Debug)]
pub struct PatchMap {
    pub p: usize,
    pub channels: usize,
    pub d_z: usize,
    pub w: Param,
    pub b: Param,
}

impl PatchMap {
    pub fn for_patchify(
        prefix: &str,
        p: usize,
        channels: usize,
        d_z: usize,
        rng: &mut ChaCha8Rng,
    ) -> PatchMap {
        let (w, b) = init_affine(prefix, "W", "b", p * p * channels, d_z, rng);
        PatchMap {
            p,
            channels,
            d_z,
            w,
            b,
        }
    }

    pub fn for_unpatchify(
        prefix: &str,
        p: usize,
        channels: usize,
        d_z: usize,
        rng: &mut ChaCha8Rng,
    ) -> PatchMap {
        let (w, b) = init_affine(prefix, "W", "b", d_z, p * p * channels, rng);
        PatchMap {
            p,
            channels,
            d_z,
            w,
            b,
        }
    }

    /// `[H, W, C] -> [H/p, W/p, d_z]`; each output cell depends only on
    /// its source patch.
    pub fn patchify(&self, tape: &Tape, image: &Tensor) -> Result<Tensor> {
        let folded = image.space_to_depth(self.p)?;
        let (gh, gw) = (folded.shape()[0], folded.shape()[1]);
        let cells = folded.reshape(&[gh * gw, self.p * self.p * self.channels])?;
        let projected = cells
            .matmul(&self.w.attach(tape))?
            .add_row(&self.b.attach(tape))?;
        projected.reshape(&[gh, gw, self.d_z])
    }

    /// `[h, w, d_z] -> [h*p, w*p, C]`, the inverse arrangement.
    pub fn unpatchify(&self, tape: &Tape, grid: &Tensor) -> Result<Tensor> {
        if grid.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "unpatchify",
                details: format!("rank-3 grid required, got {:?}", grid.shape()),
            });
        }
        let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
        let cells = grid.reshape(&[gh * gw, grid.shape()[2]])?;
        let expanded = cells
            .matmul(&self.w.attach(tape))?
            .add_row(&self.b.attach(tape))?;
        expanded
            .reshape(&[gh, gw, self.p * self.p * self.channels])?
            .depth_to_space(self.p)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Bias-corrected adaptive moment optimizer with per-parameter state.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.step = t;
    }

    /// One update over the given parameters; each must have a gradient
    /// in `grads`. Updates are per-parameter independent, so the result
    /// does not depend on iteration order.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &GradMap) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let g = grads
                .get(p.id())
                .ok_or_else(|| Error::MissingGradient(p.name().to_string()))?;
            if g.shape() != p.value().shape() {
                return Err(Error::CheckpointShape {
                    name: p.name().to_string(),
                    expected: p.value().shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut new_data = p.value().data().to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                new_data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            check_finite(&format!("adam update of {}", p.name()), &new_data)?;
            p.set_value(Tensor::new(p.value().shape().to_vec(), new_data)?)?;
        }
        Ok(())
    }

    /// Stored first/second moments for a parameter, if any.
    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) {
        self.moments.insert(id, (m, v));
    }
}

/// The operation named `fnn2_apply`: `W2 relu(W1 x + b1) + b2`.
pub fn fnn2_apply(params: &Fnn2, tape: &Tape, x: &Tensor) -> Result<Tensor> {
    params.apply(tape, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zeroed(mut f: Fnn2) -> Fnn2 {
        for p in f.params_mut() {
            let z = Tensor::zeros(p.value().shape());
            p.set_value(z).unwrap();
        }
        f
    }

    #[test]
    fn fnn2_zero_weights_zero_output() {
        let f = zeroed(Fnn2::new("t", 3, 4, 2, &mut rng(0)));
        let tape = Tape::new();
        let y = f
            .apply(&tape, &Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn fnn2_identity_relu() {
        let mut f = Fnn2::new("t", 2, 2, 2, &mut rng(0));
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        f.w1.set_value(eye.clone()).unwrap();
        f.w2.set_value(eye).unwrap();
        f.b1.set_value(Tensor::zeros(&[2])).unwrap();
        f.b2.set_value(Tensor::zeros(&[2])).unwrap();
        let tape = Tape::new();
        let y = f
            .apply(&tape, &Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn fnn2_matches_hand_rolled_affine_steps() {
        let f = Fnn2::new("t", 3, 5, 2, &mut rng(42));
        let x = vec![0.3, -1.1, 0.7];
        let tape = Tape::new();
        let got = f
            .apply(&tape, &Tensor::new(vec![3], x.clone()).unwrap())
            .unwrap();

        // Independent re-implementation of the two affine steps.
        let w1 = f.w1.value().data();
        let b1 = f.b1.value().data();
        let w2 = f.w2.value().data();
        let b2 = f.b2.value().data();
        let mut h = vec![0.0; 5];
        for j in 0..5 {
            let mut s = b1[j];
            for i in 0..3 {
                s += x[i] * w1[i * 5 + j];
            }
            h[j] = s.max(0.0);
        }
        let mut y = vec![0.0; 2];
        for j in 0..2 {
            let mut s = b2[j];
            for i in 0..5 {
                s += h[i] * w2[i * 2 + j];
            }
            y[j] = s;
        }
        for (a, b) in got.data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fnn2_parameter_gradients_pass_finite_differences() {
        let f = Fnn2::new("t", 3, 4, 2, &mut rng(9));
        let x0 = Tensor::new(vec![3], vec![0.4, -0.2, 1.3]).unwrap();

        for target in ["W1", "b1", "W2", "b2"] {
            let base = match target {
                "W1" => f.w1.value().clone(),
                "b1" => f.b1.value().clone(),
                "W2" => f.w2.value().clone(),
                _ => f.b2.value().clone(),
            };
            let eval = |v: &Tensor| -> crate::Result<Tensor> {
                let mut g = f.clone();
                match target {
                    "W1" => g.w1.set_value(v.clone())?,
                    "b1" => g.b1.set_value(v.clone())?,
                    "W2" => g.w2.set_value(v.clone())?,
                    _ => g.b2.set_value(v.clone())?,
                }
                let tape = Tape::new();
                g.apply(&tape, &x0)?.square()?.sum_all()
            };
            let fd = finite_diff_grad(&eval, &base, 1e-5).unwrap();

            let tape = Tape::new();
            let loss = f.apply(&tape, &x0).unwrap().square().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let id = match target {
                "W1" => f.w1.id(),
                "b1" => f.b1.id(),
                "W2" => f.w2.id(),
                _ => f.b2.id(),
            };
            let g = grads.get(id).unwrap();
            for (a, b) in g.data().iter().zip(fd.data()) {
                let denom = a.abs().max(b.abs()).max(1.0);
                assert!(
                    ((a - b) / denom).abs() < 1e-4,
                    "{target}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut p = Param::new("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let before = p.value().data().to_vec();
        let mut grads = GradMap::default();
        grads.insert(p.id(), Tensor::zeros(&[2]));
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p], &grads).unwrap();
        assert_eq!(p.value().data(), before.as_slice());
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut p = Param::new("p", Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
        let mut grads = GradMap::default();
        grads.insert(
            p.id(),
            Tensor::new(vec![3], vec![0.5, -0.25, 3.0]).unwrap(),
        );
        let before = p.value().data().to_vec();
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p], &grads).unwrap();
        // First step: m_hat = g, v_hat = g^2, so |delta| = lr * |g| / (|g| + eps).
        for (i, g) in [0.5f64, -0.25, 3.0].iter().enumerate() {
            let delta = p.value().data()[i] - before[i];
            let expect = -1e-3 * g / (g.abs() + 1e-8);
            assert!((delta - expect).abs() < 1e-12);
            assert!(delta.abs() > 1e-3 * (1.0 - 1e-6) && delta.abs() <= 1e-3);
        }
    }

    #[test]
    fn adam_two_steps_reduce_quadratic_loss() {
        let target = [0.7, -0.4];
        let mut p = Param::new("p", Tensor::new(vec![2], vec![2.0, 2.0]).unwrap());
        let mut adam = Adam::new(0.05);
        let loss_of = |p: &Param| -> f64 {
            p.value()
                .data()
                .iter()
                .zip(&target)
                .map(|(x, t)| (x - t) * (x - t))
                .sum()
        };
        let initial = loss_of(&p);
        for _ in 0..2 {
            let tape = Tape::new();
            let x = p.attach(&tape);
            let t = Tensor::new(vec![2], target.to_vec()).unwrap();
            let loss = x.sub(&t).unwrap().square().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            adam.step(&mut [&mut p], &grads).unwrap();
        }
        assert!(loss_of(&p) < initial);
    }

    #[test]
    fn adam_errors_on_missing_gradient() {
        let mut p = Param::new("lonely", Tensor::scalar(1.0));
        let grads = GradMap::default();
        let mut adam = Adam::new(1e-3);
        let err = adam.step(&mut [&mut p], &grads).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(name) if name == "lonely"));
    }

    #[test]
    fn adam_invariant_to_gradient_map_iteration_order() {
        // Updates touch only per-parameter state, so two parameters
        // updated in either order end at identical values.
        let mk = |seed: u64| {
            let mut r = rng(seed);
            Tensor::new(vec![2], vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).unwrap()
        };
        let mut a1 = Param::new("a", mk(1));
        let mut b1 = Param::new("b", mk(2));
        let mut a2 = a1.clone();
        let mut b2 = b1.clone();
        let mut grads = GradMap::default();
        grads.insert(a1.id(), mk(3));
        grads.insert(b1.id(), mk(4));

        let mut adam1 = Adam::new(1e-2);
        adam1.step(&mut [&mut a1, &mut b1], &grads).unwrap();
        let mut adam2 = Adam::new(1e-2);
        adam2.step(&mut [&mut b2, &mut a2], &grads).unwrap();
        assert_eq!(a1.value().data(), a2.value().data());
        assert_eq!(b1.value().data(), b2.value().data());
    }

    #[test]
    fn patchify_shape_and_inverse_shape() {
        let mut r = rng(4);
        let pm = PatchMap::for_patchify("enc.stem", 4, 3, 16, &mut r);
        let image = Tensor::zeros(&[32, 32, 3]);
        let tape = Tape::new();
        let grid = pm.patchify(&tape, &image).unwrap();
        assert_eq!(grid.shape(), &[8, 8, 16]);

        let um = PatchMap::for_unpatchify("dec.out", 4, 3, 16, &mut r);
        let back = um.unpatchify(&tape, &grid).unwrap();
        assert_eq!(back.shape(), &[32, 32, 3]);
    }

    #[test]
    fn patchify_rejects_indivisible_extents() {
        let mut r = rng(4);
        let pm = PatchMap::for_patchify("enc.stem", 4, 3, 8, &mut r);
        let tape = Tape::new();
        let err = pm.patchify(&tape, &Tensor::zeros(&[30, 32, 3])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn zero_image_zero_grid_when_bias_zero() {
        let mut r = rng(4);
        let pm = PatchMap::for_patchify("enc.stem", 4, 3, 8, &mut r);
        let tape = Tape::new();
        let grid = pm.patchify(&tape, &Tensor::zeros(&[16, 16, 3])).unwrap();
        assert!(grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_locality() {
        let mut r = rng(8);
        let pm = PatchMap::for_patchify("enc.stem", 4, 3, 8, &mut r);
        let tape = Tape::new();
        let base = Tensor::zeros(&[16, 16, 3]);
        let g0 = pm.patchify(&tape, &base).unwrap();

        // Perturb one pixel inside patch (1, 2).
        let mut data = base.data().to_vec();
        let (py, px) = (5usize, 9usize);
        data[(py * 16 + px) * 3] = 1.0;
        let poked = Tensor::new(vec![16, 16, 3], data).unwrap();
        let g1 = pm.patchify(&tape, &poked).unwrap();

        let mut changed_cells = std::collections::HashSet::new();
        for (i, (a, b)) in g0.data().iter().zip(g1.data()).enumerate() {
            if a != b {
                changed_cells.insert(i / 8);
            }
        }
        assert_eq!(changed_cells.len(), 1);
        assert!(changed_cells.contains(&(1 * 4 + 2)));
    }
}
