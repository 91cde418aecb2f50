//! Spectrogram-manifold defense: a WGAN-GP over 80x80 log-mel patches
//! and gradient-descent projection onto the generator's range.
//!
//! The generator maps a 100-dim latent to one normalized patch through
//! a dense seed and four upsample-conv stages; the critic mirrors it
//! with strided convolutions and no normalization layers, as the
//! gradient penalty requires. Projection reconstructs an utterance
//! block-by-block and blends the reconstruction with the input, which
//! is only usable under identity-backward gradients: the argmin over
//! the latent has no usable closed-form derivative.

use crate::autograd::{concat, grad, ConvSpec, Real, Storage, Tensor};
use crate::core::RngFactory;
use crate::error::AdvoxError;
use crate::model::{Adam, Conv2dLayer, DenseLayer, Tape};
use crate::Result;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Patch side: 80 frames by 80 mel bands.
pub const PATCH: usize = 80;

/// Architecture plus the data normalization fitted at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub z_dim: usize,
    /// Channel widths through the four upsampling stages; the first
    /// entry is the 5x5 seed width.
    pub gen_channels: Vec<usize>,
    pub critic_channels: Vec<usize>,
    /// Affine patch normalization: normalized = (raw - shift) / scale.
    pub shift: f64,
    pub scale: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            z_dim: 100,
            gen_channels: vec![64, 32, 16, 8, 8],
            critic_channels: vec![8, 16, 32, 64],
            shift: 0.0,
            scale: 1.0,
        }
    }
}

const SEED_SIDE: usize = 5;
const STAGES: usize = 4; // 5 * 2^4 == 80

/// Latent-to-patch generator.
pub struct GanGenerator<F: Real> {
    pub cfg: GanConfig,
    seed: DenseLayer<F>,
    convs: Vec<Conv2dLayer<F>>,
    out: Conv2dLayer<F>,
}

impl<F: Real> GanGenerator<F> {
    pub fn new(cfg: GanConfig, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(cfg.gen_channels.len(), STAGES + 1, "one width per stage plus the seed");
        let seed = DenseLayer::new(cfg.z_dim, cfg.gen_channels[0] * SEED_SIDE * SEED_SIDE, rng);
        let convs = (0..STAGES)
            .map(|i| {
                Conv2dLayer::new(
                    cfg.gen_channels[i],
                    cfg.gen_channels[i + 1],
                    3,
                    ConvSpec::plain(1, 1),
                    rng,
                )
            })
            .collect();
        let out = Conv2dLayer::new(cfg.gen_channels[STAGES], 1, 3, ConvSpec::plain(1, 1), rng);
        GanGenerator { cfg, seed, convs, out }
    }

    /// Normalized patches `[b, 1, 80, 80]` from latents `[b, z_dim]`.
    pub fn forward(&self, z: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        let b = z.shape()[0];
        let c0 = self.cfg.gen_channels[0];
        let mut h = self
            .seed
            .apply(z, tape.as_deref_mut())
            .reshape(&[b, c0, SEED_SIDE, SEED_SIDE])
            .relu();
        for conv in &self.convs {
            h = h.repeat_interleave(2, 2).repeat_interleave(3, 2);
            h = conv.apply(&h, tape.as_deref_mut()).relu();
        }
        self.out.apply(&h, tape)
    }

    /// One raw-unit patch for a single latent `[z_dim]`.
    pub fn sample(&self, z: &ndarray::Array1<F>) -> Array2<F> {
        let zt = Tensor::from_array(z.clone().into_dyn()).reshape(&[1, self.cfg.z_dim]);
        let norm = self.forward(&zt, None).reshape(&[PATCH, PATCH]);
        let out = norm
            .scale(F::from_f64c(self.cfg.scale))
            .add_scalar(F::from_f64c(self.cfg.shift));
        out.to_array().into_dimensionality::<ndarray::Ix2>().expect("patch")
    }

    pub fn params(&self) -> Vec<(String, Storage<F>)> {
        let mut out = vec![
            ("seed.w".to_string(), self.seed.w.clone()),
            ("seed.b".to_string(), self.seed.b.clone()),
        ];
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("g.{i}.w"), c.w.clone()));
            out.push((format!("g.{i}.b"), c.b.clone()));
        }
        out.push(("g_out.w".into(), self.out.w.clone()));
        out.push(("g_out.b".into(), self.out.b.clone()));
        out
    }

    pub fn assign(&mut self, values: Vec<ArrayD<F>>) {
        assert_eq!(values.len(), self.params().len());
        let mut it = values.into_iter();
        self.seed.w = it.next().unwrap().into_shared();
        self.seed.b = it.next().unwrap().into_shared();
        for c in &mut self.convs {
            c.w = it.next().unwrap().into_shared();
            c.b = it.next().unwrap().into_shared();
        }
        self.out.w = it.next().unwrap().into_shared();
        self.out.b = it.next().unwrap().into_shared();
    }
}

/// Patch critic; unbounded scalar score per patch.
pub struct GanCritic<F: Real> {
    pub cfg: GanConfig,
    convs: Vec<Conv2dLayer<F>>,
    head: DenseLayer<F>,
}

impl<F: Real> GanCritic<F> {
    pub fn new(cfg: GanConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c in &cfg.critic_channels {
            convs.push(Conv2dLayer::new(c_in, c, 3, ConvSpec::plain(2, 1), rng));
            c_in = c;
        }
        let side = PATCH >> cfg.critic_channels.len();
        let head = DenseLayer::new(c_in * side * side, 1, rng);
        GanCritic { cfg, convs, head }
    }

    /// Scores `[b]` for normalized patches `[b, 1, 80, 80]`.
    pub fn scores(&self, x: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        let b = x.shape()[0];
        let mut h = x.clone();
        for c in &self.convs {
            h = c.apply(&h, tape.as_deref_mut()).leaky_relu(F::from_f64c(0.2));
        }
        let flat = h.shape().iter().skip(1).product::<usize>();
        self.head.apply(&h.reshape(&[b, flat]), tape).reshape(&[b])
    }

    pub fn params(&self) -> Vec<(String, Storage<F>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("d.{i}.w"), c.w.clone()));
            out.push((format!("d.{i}.b"), c.b.clone()));
        }
        out.push(("d_head.w".into(), self.head.w.clone()));
        out.push(("d_head.b".into(), self.head.b.clone()));
        out
    }

    pub fn assign(&mut self, values: Vec<ArrayD<F>>) {
        assert_eq!(values.len(), self.params().len());
        let mut it = values.into_iter();
        for c in &mut self.convs {
            c.w = it.next().unwrap().into_shared();
            c.b = it.next().unwrap().into_shared();
        }
        self.head.w = it.next().unwrap().into_shared();
        self.head.b = it.next().unwrap().into_shared();
    }

    pub fn cast<G: Real>(&self) -> GanCritic<G> {
        let mut rng = crate::core::seeded_rng(0);
        let mut out = GanCritic::<G>::new(self.cfg.clone(), &mut rng);
        let values: Vec<ArrayD<G>> = self
            .params()
            .into_iter()
            .map(|(_, p)| p.mapv(|v| G::from_f64c(v.to_f64().unwrap())).into_dyn())
            .collect();
        out.assign(values);
        out
    }
}

/// Gradient-penalty term `mean((||dD/dx|| - 1)^2)` at interpolates
/// between real and fake patches. Returns a graph node, so it is
/// differentiable with respect to the critic weights.
pub(crate) fn gradient_penalty<F: Real>(
    critic: &GanCritic<F>,
    tape: &mut Tape<F>,
    real: &Tensor<F>,
    fake: &Tensor<F>,
    u: &ArrayD<F>,
) -> Tensor<F> {
    let mix = Tensor::from_array(u.clone()).broadcast_to(real.shape());
    let one_minus = Tensor::from_array(u.mapv(|v| F::one() - v)).broadcast_to(real.shape());
    let interp_vals = (&(&mix * real) + &(&one_minus * fake)).to_array();
    let xhat = Tensor::param(interp_vals.into_shared());
    let s = critic.scores(&xhat, Some(tape)).sum_all();
    let g = grad(&s, &[&xhat], None).remove(0);
    let norms = (&g * &g)
        .sum_axes(&[1, 2, 3], false)
        .add_scalar(F::from_f64c(1e-12))
        .sqrt();
    let shifted = norms.add_scalar(F::from_f64c(-1.0));
    (&shifted * &shifted).mean_all()
}

/// WGAN-GP training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WganTrainConfig {
    /// Number of generator updates.
    pub gen_steps: usize,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gp_weight: f64,
}

impl Default for WganTrainConfig {
    fn default() -> Self {
        WganTrainConfig {
            gen_steps: 300,
            n_critic: 5,
            batch_size: 16,
            lr: 2e-4,
            gp_weight: 10.0,
        }
    }
}

/// Per-generator-step traces of the Wasserstein estimate and penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WganReport {
    pub wasserstein: Vec<f64>,
    pub gradient_penalty: Vec<f64>,
}

fn normal_array<F: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::from_f64c(normal.sample(rng)))
}

fn stack_patches(patches: &[&Array2<f32>]) -> ArrayD<f32> {
    let mut out = ArrayD::zeros(IxDyn(&[patches.len(), 1, PATCH, PATCH]));
    for (i, p) in patches.iter().enumerate() {
        for ((a, b), &v) in p.indexed_iter() {
            out[[i, 0, a, b]] = v;
        }
    }
    out
}

/// Cut whole 80-frame patches out of a spectrogram; partial tails are
/// dropped (training data, not inference).
pub fn cut_patches(spec: &Array2<f32>) -> Vec<Array2<f32>> {
    assert_eq!(spec.dim().0, PATCH, "expected {PATCH} mel bands");
    let t = spec.dim().1;
    (0..t / PATCH)
        .map(|i| {
            Array2::from_shape_fn((PATCH, PATCH), |(m, f)| spec[[m, i * PATCH + f]])
        })
        .collect()
}

/// Train a WGAN-GP on benign patches. The returned generator carries
/// the fitted patch normalization in its config.
pub fn train_wgan(
    cfg: &GanConfig,
    tc: &WganTrainConfig,
    patches: &[Array2<f32>],
    rngf: &RngFactory,
) -> Result<(GanGenerator<f32>, GanCritic<f32>, WganReport)> {
    assert!(!patches.is_empty(), "patch set is empty");
    for p in patches {
        assert_eq!(p.dim(), (PATCH, PATCH), "patches must be {PATCH}x{PATCH}");
    }

    // Fit the affine normalization on the raw patches.
    let n_vals = (patches.len() * PATCH * PATCH) as f64;
    let mean = patches.iter().map(|p| p.iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / n_vals;
    let var = patches
        .iter()
        .map(|p| p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n_vals;
    let cfg = GanConfig {
        shift: mean,
        scale: var.sqrt().max(1e-6),
        ..cfg.clone()
    };
    let normalized: Vec<Array2<f32>> = patches
        .iter()
        .map(|p| p.mapv(|v| ((v as f64 - cfg.shift) / cfg.scale) as f32))
        .collect();

    let mut generator = GanGenerator::<f32>::new(cfg.clone(), &mut rngf.stream("wgan/g-init"));
    let mut critic = GanCritic::<f32>::new(cfg.clone(), &mut rngf.stream("wgan/d-init"));
    let mut g_adam = Adam::<f32>::new(tc.lr);
    let mut d_adam = Adam::<f32>::new(tc.lr);

    let mut batch_rng = rngf.stream("wgan/batch");
    let mut z_rng = rngf.stream("wgan/z");
    let mut mix_rng = rngf.stream("wgan/mix");

    let mut wasserstein = Vec::with_capacity(tc.gen_steps);
    let mut gp_trace = Vec::with_capacity(tc.gen_steps);

    for step in 0..tc.gen_steps {
        let mut last_w = 0.0;
        let mut last_gp = 0.0;
        for _ in 0..tc.n_critic {
            let picks: Vec<&Array2<f32>> = (0..tc.batch_size)
                .map(|_| &normalized[batch_rng.gen_range(0..normalized.len())])
                .collect();
            let real = Tensor::from_array(stack_patches(&picks));
            let z = Tensor::from_array(normal_array::<f32>(&[tc.batch_size, cfg.z_dim], &mut z_rng));
            let fake = generator.forward(&z, None);
            let u = {
                let mut u = ArrayD::zeros(IxDyn(&[tc.batch_size, 1, 1, 1]));
                for v in u.iter_mut() {
                    *v = mix_rng.gen_range(0.0..1.0f32);
                }
                u
            };

            let mut dtape = Tape::new();
            let s = critic.scores(&concat(&[real.clone(), fake.clone()], 0), Some(&mut dtape));
            let s_real = s.slice_view(&[(0, tc.batch_size)]).mean_all();
            let s_fake = s.slice_view(&[(tc.batch_size, tc.batch_size)]).mean_all();
            let gp = gradient_penalty(&critic, &mut dtape, &real, &fake, &u);
            let d_loss = &(&s_fake - &s_real) + &gp.scale(tc.gp_weight as f32);

            last_w = (s_real.item() - s_fake.item()) as f64;
            last_gp = gp.item() as f64;
            if !d_loss.item().is_finite() {
                return Err(AdvoxError::Divergence(format!(
                    "non-finite critic loss at generator step {step} \
                     (wasserstein trace {wasserstein:?})"
                )));
            }

            // The penalty pass recorded a second set of critic leaves;
            // fold both contribution sets into one gradient per weight.
            let leaf_refs: Vec<&Tensor<f32>> = dtape.leaves.iter().collect();
            let all: Vec<ArrayD<f32>> = grad(&d_loss, &leaf_refs, None)
                .into_iter()
                .map(|g| g.to_array())
                .collect();
            let n_params = critic.params().len();
            let mut grads = all[..n_params].to_vec();
            for (i, extra) in all[n_params..].iter().enumerate() {
                grads[i] = &grads[i] + extra;
            }
            let storages: Vec<_> = critic.params().into_iter().map(|(_, p)| p).collect();
            let updated = d_adam.step(&storages, &grads, &[]);
            critic.assign(updated);
        }
        wasserstein.push(last_w);
        gp_trace.push(last_gp);

        let z = Tensor::from_array(normal_array::<f32>(&[tc.batch_size, cfg.z_dim], &mut z_rng));
        let mut gtape = Tape::new();
        let fake = generator.forward(&z, Some(&mut gtape));
        let g_loss = critic.scores(&fake, None).mean_all().neg();
        if !g_loss.item().is_finite() {
            return Err(AdvoxError::Divergence(format!(
                "non-finite generator loss at step {step} (wasserstein trace {wasserstein:?})"
            )));
        }
        let leaf_refs: Vec<&Tensor<f32>> = gtape.leaves.iter().collect();
        let grads: Vec<ArrayD<f32>> = grad(&g_loss, &leaf_refs, None)
            .into_iter()
            .map(|g| g.to_array())
            .collect();
        let storages: Vec<_> = generator.params().into_iter().map(|(_, p)| p).collect();
        let updated = g_adam.step(&storages, &grads, &[]);
        generator.assign(updated);
    }

    Ok((generator, critic, WganReport { wasserstein, gradient_penalty: gp_trace }))
}

/// Latent-descent projection parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanProjection {
    pub restarts: usize,
    pub iters: usize,
    pub lr: f64,
    /// Blend weight of the reconstruction against the input.
    pub alpha: f64,
}

impl Default for GanProjection {
    fn default() -> Self {
        GanProjection { restarts: 10, iters: 300, lr: 0.025, alpha: 0.5 }
    }
}

/// Project a spectrogram onto the generator manifold block by block,
/// returning the blended output and the number of generator
/// forward/backward passes spent.
pub fn defense_gan_project_counted<F: Real>(
    g: &GanGenerator<F>,
    x_spec: &Array2<F>,
    proj: &GanProjection,
    rng: &mut ChaCha8Rng,
) -> (Array2<F>, usize) {
    assert_eq!(x_spec.dim().0, PATCH, "expected {PATCH} mel bands");
    let t = x_spec.dim().1;
    let blocks = t.div_ceil(PATCH);
    let mut out = Array2::<F>::zeros((PATCH, t));
    let mut passes = 0usize;
    let normal = Normal::new(0.0, 1.0).unwrap();

    for bi in 0..blocks {
        let t0 = bi * PATCH;
        let width = (t - t0).min(PATCH);
        // Normalized target, zero-padded to a full patch.
        let mut target = ArrayD::<F>::zeros(IxDyn(&[1, 1, PATCH, PATCH]));
        for m in 0..PATCH {
            for f in 0..width {
                let v = x_spec[[m, t0 + f]].to_f64().unwrap();
                target[[0, 0, m, f]] = F::from_f64c((v - g.cfg.shift) / g.cfg.scale);
            }
        }
        let target = Tensor::from_array(target);

        // Track the best evaluated iterate over all restarts.
        let mut best_err = f64::INFINITY;
        let mut best_patch: Option<ArrayD<F>> = None;
        for _ in 0..proj.restarts {
            let z0 = ArrayD::from_shape_simple_fn(IxDyn(&[1, g.cfg.z_dim]), || {
                F::from_f64c(normal.sample(rng))
            });
            let mut z = z0.into_shared();
            let mut adam = Adam::<F>::new(proj.lr);
            for _ in 0..proj.iters {
                let zt = Tensor::param(z.clone());
                let patch = g.forward(&zt, None);
                let diff = &patch - &target;
                let err = (&diff * &diff).sum_all();
                passes += 1;
                let e = err.item().to_f64().unwrap();
                if e < best_err {
                    best_err = e;
                    best_patch = Some(patch.to_array());
                }
                let gz = grad(&err, &[&zt], None).remove(0).to_array();
                z = adam.step(&[z.clone()], &[gz], &[]).remove(0).into_shared();
            }
        }

        let best = best_patch.expect("at least one evaluated iterate");
        let alpha = proj.alpha;
        for m in 0..PATCH {
            for f in 0..width {
                out[[m, t0 + f]] = if alpha == 0.0 {
                    x_spec[[m, t0 + f]]
                } else {
                    let recon =
                        best[[0, 0, m, f]].to_f64().unwrap() * g.cfg.scale + g.cfg.shift;
                    let x = x_spec[[m, t0 + f]].to_f64().unwrap();
                    F::from_f64c(alpha * recon + (1.0 - alpha) * x)
                };
            }
        }
    }
    (out, passes)
}

/// Blend of the input with its best manifold reconstruction.
pub fn defense_gan_project<F: Real>(
    g: &GanGenerator<F>,
    x_spec: &Array2<F>,
    proj: &GanProjection,
    rng: &mut ChaCha8Rng,
) -> Array2<F> {
    defense_gan_project_counted(g, x_spec, proj, rng).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::seeded_rng;
    use ndarray::Array1;

    fn tiny_cfg() -> GanConfig {
        GanConfig {
            z_dim: 12,
            gen_channels: vec![8, 8, 4, 4, 4],
            critic_channels: vec![2, 4, 8, 8],
            ..GanConfig::default()
        }
    }

    /// Smooth synthetic patches with a shared structure.
    fn toy_patches(n: usize) -> Vec<Array2<f32>> {
        (0..n)
            .map(|i| {
                let phase = i as f32 * 0.37;
                Array2::from_shape_fn((PATCH, PATCH), |(m, f)| {
                    -12.0 + 6.0 * ((m as f32 * 0.15 + phase).sin() + (f as f32 * 0.08).cos())
                })
            })
            .collect()
    }

    #[test]
    fn generator_emits_one_80_by_80_patch_for_any_latent() {
        let g = GanGenerator::<f32>::new(tiny_cfg(), &mut seeded_rng(1));
        for seed in 0..3 {
            let mut rng = seeded_rng(seed);
            let z = Array1::from_shape_fn(12, |_| rng.gen_range(-2.0..2.0f32));
            let p = g.sample(&z);
            assert_eq!(p.dim(), (PATCH, PATCH));
            assert!(p.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn training_ranks_real_patches_above_fakes() {
        let patches = toy_patches(24);
        let tc = WganTrainConfig {
            gen_steps: 25,
            n_critic: 2,
            batch_size: 8,
            lr: 1e-3,
            gp_weight: 10.0,
        };
        let rngf = RngFactory::new(42);
        let (g, d, report) = train_wgan(&tiny_cfg(), &tc, &patches, &rngf).unwrap();
        assert_eq!(report.wasserstein.len(), 25);

        // Score held-back real patches against fresh fakes.
        let held: Vec<Array2<f32>> = toy_patches(40)[24..]
            .iter()
            .map(|p| p.mapv(|v| ((v as f64 - g.cfg.shift) / g.cfg.scale) as f32))
            .collect();
        let real_norm = stack_patches(&held.iter().collect::<Vec<_>>());
        let mut z_rng = seeded_rng(9);
        let z = Tensor::from_array(normal_array::<f32>(&[16, g.cfg.z_dim], &mut z_rng));
        let fake = g.forward(&z, None);
        let s_real = d.scores(&Tensor::from_array(real_norm), None).mean_all().item();
        let s_fake = d.scores(&fake, None).mean_all().item();
        assert!(
            s_real > s_fake,
            "critic should rank real above fake: {s_real:.3} vs {s_fake:.3}"
        );
    }

    #[test]
    fn gradient_penalty_agrees_with_finite_differences() {
        let critic = GanCritic::<f32>::new(tiny_cfg(), &mut seeded_rng(17)).cast::<f64>();
        let mut rng = seeded_rng(23);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, PATCH, PATCH]), || {
            rng.gen_range(-1.0..1.0f64)
        });

        // Analytic penalty via the double-backward path.
        let mut tape = Tape::new();
        let zeros = Tensor::from_array(ArrayD::<f64>::zeros(IxDyn(&[1, 1, PATCH, PATCH])));
        let xt = Tensor::from_array(x.clone());
        let u = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0f64);
        let analytic = gradient_penalty(&critic, &mut tape, &xt, &zeros, &u).item();

        // Finite-difference gradient norm at the same point.
        let h = 1e-5;
        let score = |arr: &ArrayD<f64>| -> f64 {
            critic.scores(&Tensor::from_array(arr.clone()), None).item()
        };
        let mut sq_norm = 0.0;
        let mut probe = x.clone();
        for idx in 0..probe.len() {
            let flat = probe.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + h;
            let fp = score(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = score(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig;
            let g = (fp - fm) / (2.0 * h);
            sq_norm += g * g;
        }
        let expected = (sq_norm.sqrt() - 1.0).powi(2);
        assert!(
            (analytic - expected).abs() <= 1e-6 * expected.max(1.0),
            "penalty {analytic} vs finite differences {expected}"
        );
    }

    #[test]
    fn zero_alpha_blend_returns_the_input_bitwise() {
        let g = GanGenerator::<f32>::new(tiny_cfg(), &mut seeded_rng(2));
        let spec = Array2::from_shape_fn((PATCH, 100), |(m, t)| {
            -10.0 + 0.05 * (m as f32) - 0.02 * (t as f32)
        });
        let proj = GanProjection { restarts: 1, iters: 2, alpha: 0.0, ..GanProjection::default() };
        let (out, passes) = defense_gan_project_counted(&g, &spec, &proj, &mut seeded_rng(5));
        assert_eq!(passes, 2 * 2, "two blocks at R*L passes each");
        assert_eq!(out, spec, "alpha = 0 must return the input bitwise");
    }

    #[test]
    fn projection_recovers_on_manifold_points_better_than_chance() {
        let g = GanGenerator::<f32>::new(tiny_cfg(), &mut seeded_rng(3));
        let mut rng = seeded_rng(31);
        let z0 = Array1::from_shape_fn(12, |_| rng.gen_range(-1.0..1.0f32));
        let on_manifold = g.sample(&z0);

        let proj = GanProjection { restarts: 3, iters: 40, lr: 0.05, alpha: 1.0 };
        let (out, passes) = defense_gan_project_counted(&g, &on_manifold, &proj, &mut seeded_rng(7));
        assert_eq!(passes, 3 * 40);

        let err_best: f64 = (&out - &on_manifold).mapv(|v| (v as f64).powi(2)).sum();
        let z_rand = Array1::from_shape_fn(12, |_| rng.gen_range(-1.0..1.0f32));
        let err_rand: f64 = (&g.sample(&z_rand) - &on_manifold)
            .mapv(|v| (v as f64).powi(2))
            .sum();
        assert!(
            err_best < err_rand,
            "optimized reconstruction {err_best:.4} should beat a random latent {err_rand:.4}"
        );
    }
}
