//! Diffusion machinery: noise schedule, forward noising, deterministic
//! sampling, and the Adam optimizer with gradient clipping.

use crate::error::{Error, Result};
use crate::model::{build_inputs, ConditionSet, ModelInputs, ModelParams};
use crate::rng::SplitMix64;
use crate::{Tape, Tensor};

/// Global gradient-norm ceiling applied before every optimizer step.
pub const GRAD_CLIP_NORM: f64 = 1.0;

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

/// Precomputed beta/alpha tables for a discrete-time diffusion process.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Cumulative products of `alpha`, one per timestep.
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::contract(format!(
                "timestep {t} out of range for a {}-step schedule",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_steps == 0 {
        return Err(Error::config("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
        return Err(Error::config(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let mut betas = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let frac = if t_steps == 1 { 0.0 } else { t as f64 / (t_steps - 1) as f64 };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule { betas, alphas, alpha_bars })
}

/// Noises a clean grid: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "q_sample: x0 shape {:?} vs eps shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bars[t];
    let c0 = ab.sqrt();
    let c1 = (1.0 - ab).sqrt();
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| c0 * x + c1 * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

/// Anything that can predict the noise content of a noisy target grid.
pub trait NoisePredictor {
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &ConditionSet) -> Result<Tensor>;
}

impl NoisePredictor for ModelParams {
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &ConditionSet) -> Result<Tensor> {
        let inputs = build_inputs(cond, x_t, self.dims.patch)?;
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let bound = self.bind(&mut tape, &mut order)?;
        let (out, _) = bound.forward(&mut tape, &inputs, t, false)?;
        let s = x_t.shape();
        let grid = crate::modality::GridShape::new(s[0], s[1], s[2], s[3]);
        crate::modality::unpatchify(tape.value(out), grid, self.dims.patch)
    }
}

/// Descending evaluation timesteps for a `steps`-step deterministic sampler
/// over a `t_total`-step schedule. Endpoints are pinned to `t_total - 1` and
/// (for two or more steps) to 0.
pub fn ddim_taus(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    if steps > t_total {
        return Err(Error::config(format!(
            "sampler steps {steps} exceed schedule length {t_total}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_total - 1]);
    }
    let mut taus = Vec::with_capacity(steps);
    for j in (0..steps).rev() {
        let tau = (t_total - 1) * j / (steps - 1);
        if taus.last() != Some(&tau) {
            taus.push(tau);
        }
    }
    Ok(taus)
}

/// Deterministic (eta = 0) reverse process. Draws the initial noise from
/// `rng`, then runs the predictor at each tau. Returns the final clean-grid
/// estimate in model range.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    sched: &DiffusionSchedule,
    cond: &ConditionSet,
    steps: usize,
    rng: &mut SplitMix64,
) -> Result<Tensor> {
    let taus = ddim_taus(sched.len(), steps)?;
    let shape = cond.agnostic.shape().to_vec();
    let mut x = Tensor::randn(&shape, 1.0, rng);
    for (i, &t) in taus.iter().enumerate() {
        let eps = predictor.predict_eps(&x, t, cond)?;
        eps.check_finite(&format!("noise prediction at t={t}"))?;
        if eps.shape() != x.shape() {
            return Err(Error::shape(format!(
                "predictor returned shape {:?} for input {:?}",
                eps.shape(),
                x.shape()
            )));
        }
        let ab = sched.alpha_bars[t];
        let ab_prev = match taus.get(i + 1) {
            Some(&tp) => sched.alpha_bars[tp],
            None => 1.0,
        };
        let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (sap, s1ap) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xt, &e)| {
                let x0_hat = (xt - s1a * e) / sa;
                sap * x0_hat + s1ap * e
            })
            .collect();
        x = Tensor::new(shape.clone(), data)?;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one tensor per parameter in canonical
/// visit order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamState {
    pub fn new(model: &ModelParams) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |_, t| m.push(Tensor::full(t.shape(), 0.0)));
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One Adam update over all parameters, in place.
    pub fn update(
        &mut self,
        model: &mut ModelParams,
        grads: &[Tensor],
        hp: &AdamParams,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.step as i32);
        let mut idx = 0;
        let mut bad: Option<String> = None;
        model.visit_mut(&mut |name, p| {
            let g = &grads[idx];
            if g.shape() != p.shape() && bad.is_none() {
                bad = Some(format!(
                    "adam: gradient shape {:?} vs parameter {name} shape {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            if bad.is_none() {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                for i in 0..p.numel() {
                    let gi = g.data()[i];
                    let mi = hp.beta1 * m.data()[i] + (1.0 - hp.beta1) * gi;
                    let vi = hp.beta2 * v.data()[i] + (1.0 - hp.beta2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    p.data_mut()[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
                }
            }
            idx += 1;
        });
        match bad {
            Some(msg) => Err(Error::shape(msg)),
            None => Ok(()),
        }
    }
}

/// Euclidean norm over all gradient tensors together.
pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    let mut acc = 0.0;
    for g in grads {
        for &x in g.data() {
            acc += x * x;
        }
    }
    acc.sqrt()
}

/// Scales all gradients down so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// one optimization step
// ---------------------------------------------------------------------------

/// One training example: tokenized inputs, the timestep, and the patchified
/// noise the model should predict for the target tokens.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub inputs: ModelInputs,
    pub t: usize,
    /// `[Lt, out_width]` patchified noise.
    pub eps_tokens: Tensor,
}

/// One batched training step: builds a single tape over the whole batch,
/// averages per-item losses, backpropagates, clips, and applies Adam.
/// Returns the batch loss.
pub fn train_step(
    model: &mut ModelParams,
    batch: &[TrainItem],
    adam: &mut AdamState,
    hp: &AdamParams,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("train_step: empty batch"));
    }
    let mut tape = Tape::new();
    let mut order = Vec::new();
    let bound = model.bind(&mut tape, &mut order)?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut total = None;
    for item in batch {
        let (pred, _) = bound.forward(&mut tape, &item.inputs, item.t, false)?;
        let tv = tape.constant(&item.eps_tokens)?;
        let li = tape.mse(pred, tv)?;
        let scaled = tape.scale(li, inv_b)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let loss_var = total.expect("batch checked nonempty");
    let loss = tape.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(Error::numeric(format!("training loss became {loss}")));
    }
    tape.backward(loss_var)?;
    let mut grads: Vec<Tensor> = order.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    clip_gradients(&mut grads, GRAD_CLIP_NORM);
    adam.update(model, &grads, hp)?;
    Ok(loss)
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockVariant;
    use crate::model::{ModelDims, TEXT_PAD, TEXT_UPPER};

    fn sched100() -> DiffusionSchedule {
        linear_schedule(100, 1e-4, 0.02).unwrap()
    }

    // ---- schedule -------------------------------------------------------

    #[test]
    fn schedule_tables_are_consistent() {
        let s = sched100();
        assert_eq!(s.len(), 100);
        assert_eq!(s.betas[0], 1e-4);
        assert_eq!(s.betas[99], 0.02);
        for t in 1..100 {
            assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
            assert!(s.alpha_bars[t] > 0.0 && s.alpha_bars[t] < 1.0);
        }
        // Independent recomputation of the final cumulative product.
        let mut prod = 1.0;
        for t in 0..100 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 99.0);
        }
        assert!((s.alpha_bars[99] - prod).abs() < 1e-15);
        assert!((s.alpha_bars[99] - 0.3635632480554922).abs() < 1e-15);
        assert!(s.alpha_bars[99] < 0.37);
    }

    #[test]
    fn constant_beta_closed_form() {
        let s = linear_schedule(7, 0.01, 0.01).unwrap();
        for t in 0..7 {
            let want = 0.99f64.powi(t as i32 + 1);
            assert!((s.alpha_bars[t] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 1e-4, 1.0).is_err());
        assert!(linear_schedule(10, 0.02, 0.01).is_err());
        assert!(linear_schedule(1, 0.01, 0.01).is_ok());
    }

    // ---- q_sample -------------------------------------------------------

    #[test]
    fn q_sample_first_step_coefficients() {
        // abar_0 = 1 - 1e-4, so the mix is 0.9999499987499375 x0 + 0.01 eps.
        let s = sched100();
        let x0 = Tensor::new(vec![1, 1, 2, 1], vec![1.0, -0.5]).unwrap();
        let eps = Tensor::new(vec![1, 1, 2, 1], vec![2.0, 4.0]).unwrap();
        let xt = q_sample(&x0, 0, &eps, &s).unwrap();
        // 1 - abar_0 re-rounds, so the noise coefficient sits ~6e-16 off the
        // ideal 0.01; 1e-13 still pins both constants to 13 digits.
        let c0 = 0.9999499987499375;
        assert!((xt.data()[0] - (c0 + 0.01 * 2.0)).abs() < 1e-13);
        assert!((xt.data()[1] - (c0 * -0.5 + 0.01 * 4.0)).abs() < 1e-13);
    }

    #[test]
    fn q_sample_bounds_checked() {
        let s = sched100();
        let x = Tensor::full(&[1, 1, 1, 1], 0.0);
        assert!(q_sample(&x, 100, &x, &s).is_err());
        let other = Tensor::full(&[1, 1, 2, 1], 0.0);
        assert!(q_sample(&x, 0, &other, &s).is_err());
    }

    // ---- tau spacing ----------------------------------------------------

    #[test]
    fn tau_spacing() {
        assert_eq!(ddim_taus(100, 1).unwrap(), vec![99]);
        assert_eq!(ddim_taus(100, 2).unwrap(), vec![99, 0]);
        assert_eq!(ddim_taus(100, 4).unwrap(), vec![99, 66, 33, 0]);
        let all = ddim_taus(100, 100).unwrap();
        assert_eq!(all.len(), 100);
        assert_eq!(all[0], 99);
        assert_eq!(*all.last().unwrap(), 0);
        assert!(all.windows(2).all(|w| w[0] > w[1]));
        assert!(ddim_taus(100, 0).is_err());
        assert!(ddim_taus(100, 101).is_err());
    }

    // ---- sampler oracles ------------------------------------------------

    struct OracleEps {
        x0: Tensor,
    }

    impl NoisePredictor for OracleEps {
        fn predict_eps(&self, x_t: &Tensor, t: usize, _: &ConditionSet) -> Result<Tensor> {
            // Inverts q_sample: the exact noise that produced x_t from x0.
            let s = sched100();
            let ab = s.alpha_bars[t];
            let data = x_t
                .data()
                .iter()
                .zip(self.x0.data())
                .map(|(&xt, &x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect();
            Tensor::new(x_t.shape().to_vec(), data)
        }
    }

    struct ZeroEps;

    impl NoisePredictor for ZeroEps {
        fn predict_eps(&self, x_t: &Tensor, _: usize, _: &ConditionSet) -> Result<Tensor> {
            Ok(Tensor::full(x_t.shape(), 0.0))
        }
    }

    fn tiny_cond() -> (Tensor, Tensor, Tensor, Vec<usize>) {
        let garment = Tensor::full(&[1, 2, 2, 1], 0.1);
        let agnostic = Tensor::full(&[1, 12, 12, 1], 0.2);
        let mask = Tensor::full(&[1, 12, 12, 1], 1.0);
        (garment, agnostic, mask, vec![TEXT_UPPER])
    }

    #[test]
    fn perfect_noise_prediction_recovers_the_clean_grid() {
        let (garment, agnostic, mask, ids) = tiny_cond();
        let cond = ConditionSet { text_ids: &ids, garment: &garment, agnostic: &agnostic, mask: &mask };
        let x0 = Tensor::randn(&[1, 12, 12, 1], 1.0, &mut SplitMix64::new(5));
        let s = sched100();
        for steps in [1, 7] {
            let out =
                ddim_sample(&OracleEps { x0: x0.clone() }, &s, &cond, steps, &mut SplitMix64::new(9))
                    .unwrap();
            for (a, b) in out.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-9, "steps={steps}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_prediction_telescopes_to_a_pure_rescale() {
        // With eps-hat = 0 every update multiplies by sqrt(abar_prev/abar_t),
        // so the product telescopes to 1/sqrt(abar_{T-1}).
        let (garment, agnostic, mask, ids) = tiny_cond();
        let cond = ConditionSet { text_ids: &ids, garment: &garment, agnostic: &agnostic, mask: &mask };
        let s = sched100();
        let out = ddim_sample(&ZeroEps, &s, &cond, 7, &mut SplitMix64::new(11)).unwrap();
        let x_t = Tensor::randn(&[1, 12, 12, 1], 1.0, &mut SplitMix64::new(11));
        let gain = 1.0 / s.alpha_bars[99].sqrt();
        for (o, x) in out.data().iter().zip(x_t.data()) {
            assert!((o - x * gain).abs() < 1e-12 * gain.max(1.0));
        }
    }

    #[test]
    fn sampler_rejects_non_finite_predictions() {
        struct NanEps;
        impl NoisePredictor for NanEps {
            fn predict_eps(&self, x_t: &Tensor, _: usize, _: &ConditionSet) -> Result<Tensor> {
                Ok(Tensor::full(x_t.shape(), f64::NAN))
            }
        }
        let (garment, agnostic, mask, ids) = tiny_cond();
        let cond = ConditionSet { text_ids: &ids, garment: &garment, agnostic: &agnostic, mask: &mask };
        let err = ddim_sample(&NanEps, &sched100(), &cond, 2, &mut SplitMix64::new(1));
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    // ---- optimizer ------------------------------------------------------

    #[test]
    fn gradient_clipping_rescales_to_the_ceiling() {
        let mut grads = vec![
            Tensor::new(vec![2], vec![3.0, 0.0]).unwrap(),
            Tensor::new(vec![1], vec![4.0]).unwrap(),
        ];
        let norm = clip_gradients(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        let after = global_grad_norm(&grads);
        assert!((after - 1.0).abs() < 1e-12);
        // Already small: untouched.
        let mut small = vec![Tensor::new(vec![1], vec![0.5]).unwrap()];
        let n2 = clip_gradients(&mut small, 1.0);
        assert_eq!(n2, 0.5);
        assert_eq!(small[0].data()[0], 0.5);
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        let dims = ModelDims { d: 6, heads: 1, layers: 1, patch: 1, channels: 1 };
        let mut model = ModelParams::init(BlockVariant::MnV3, dims, &mut SplitMix64::new(3)).unwrap();
        let before = model.flatten();
        let grads: Vec<Tensor> = {
            let mut g = Vec::new();
            model.visit(&mut |_, t| g.push(Tensor::full(t.shape(), 0.0)));
            g
        };
        // All-zero gradients: parameters must not move.
        let mut adam = AdamState::new(&model);
        adam.update(&mut model, &grads, &AdamParams::default()).unwrap();
        let after = model.flatten();
        assert_eq!(before.data(), after.data());

        // Unit gradient on every coordinate: first step is ~lr.
        let ones: Vec<Tensor> = grads.iter().map(|g| Tensor::full(g.shape(), 1.0)).collect();
        let mut adam2 = AdamState::new(&model);
        adam2.update(&mut model, &ones, &AdamParams::default()).unwrap();
        let moved = model.flatten();
        for (a, b) in after.data().iter().zip(moved.data()) {
            assert!(((a - b) - 1e-3).abs() < 1e-9, "step {}", a - b);
        }
    }

    // ---- train step -----------------------------------------------------

    fn overfit_items(seed: u64) -> (ModelParams, Vec<TrainItem>) {
        let dims = ModelDims { d: 12, heads: 2, layers: 1, patch: 2, channels: 3 };
        let model = ModelParams::init(BlockVariant::MnV3, dims, &mut SplitMix64::new(seed)).unwrap();
        let mut rng = SplitMix64::new(seed + 1);
        let garment = Tensor::randn(&[1, 4, 4, 3], 0.5, &mut rng);
        let agnostic = Tensor::randn(&[1, 8, 8, 3], 0.5, &mut rng);
        let mask = Tensor::full(&[1, 8, 8, 1], 1.0);
        let ids = vec![TEXT_UPPER, TEXT_PAD];
        let cond = ConditionSet { text_ids: &ids, garment: &garment, agnostic: &agnostic, mask: &mask };
        let x_noisy = Tensor::randn(&[1, 8, 8, 3], 1.0, &mut rng);
        let inputs = build_inputs(&cond, &x_noisy, 2).unwrap();
        let eps_tokens = Tensor::randn(&[16, 12], 1.0, &mut rng);
        (model, vec![TrainItem { inputs, t: 31, eps_tokens }])
    }

    #[test]
    fn train_step_overfits_a_single_item() {
        let (mut model, items) = overfit_items(21);
        let mut adam = AdamState::new(&model);
        let hp = AdamParams::default();
        let first = train_step(&mut model, &items, &mut adam, &hp).unwrap();
        let mut last = first;
        for _ in 0..299 {
            last = train_step(&mut model, &items, &mut adam, &hp).unwrap();
        }
        assert!(
            last < 0.05 * first && last < 0.05,
            "loss went {first} -> {last} in 300 steps"
        );
    }

    #[test]
    fn train_step_is_bitwise_deterministic() {
        let run = || {
            let (mut model, items) = overfit_items(33);
            let mut adam = AdamState::new(&model);
            let hp = AdamParams::default();
            for _ in 0..5 {
                train_step(&mut model, &items, &mut adam, &hp).unwrap();
            }
            model.flatten()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn train_step_rejects_empty_batch() {
        let (mut model, _) = overfit_items(44);
        let mut adam = AdamState::new(&model);
        let err = train_step(&mut model, &[], &mut adam, &AdamParams::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
