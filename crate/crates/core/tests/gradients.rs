//! Central finite-difference checks of the hand-written reverse pass.

mod common;

use outpaint_core::conditioning::{
    mlp_on_tape, AblationFlags, ConditionMode, FusionParams, FUSION_PREFIX,
};
use outpaint_core::diffusion::{loss_and_grads, StepNoise};
use outpaint_core::model::{ModelConfig, OutpaintModel};
use outpaint_core::params::ParamStore;
use outpaint_core::tape::{Matrix, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_shape_simple_fn((r, c), || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

/// `||a - n|| / max(||a||, ||n||)` over the listed entries.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Loss of the fusion MLP on fixed inputs against a fixed target.
fn fusion_loss(params: &ParamStore, g: &Matrix, l: &Matrix, target: &Matrix) -> (f64, Tape, Vec<(String, outpaint_core::tape::Var)>, [outpaint_core::tape::Var; 2], outpaint_core::tape::Var) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let gv = tape.leaf(g.clone());
    let lv = tape.leaf(l.clone());
    let cat = tape.concat_cols(&[gv, lv]);
    let out = mlp_on_tape(&mut tape, &bound, FUSION_PREFIX, cat).unwrap();
    let t = tape.leaf(target.clone());
    let loss = tape.mse(out, t);
    let names: Vec<(String, _)> = params
        .names()
        .map(|n| (n.to_string(), bound.var(n).unwrap()))
        .collect();
    (tape.scalar(loss), tape, names, [gv, lv], loss)
}

#[test]
fn fusion_mlp_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (tokens, d, h) = (5, 6, 7);
    let mut params = ParamStore::new();
    FusionParams::init(2 * d, h, d, &mut rng).store_into(FUSION_PREFIX, &mut params);
    for (name, m) in params.iter().map(|(n, m)| (n.to_string(), m.clone())).collect::<Vec<_>>() {
        if name.ends_with('b') || name.contains(".b") {
            params.insert(name, m.mapv(|_| rng.random_range(-0.3..0.3)));
        }
    }
    let g = randn(&mut rng, tokens, d, 1.0);
    let l = randn(&mut rng, tokens, d, 1.0);
    let target = randn(&mut rng, tokens, d, 1.0);

    let (_, tape, names, [gv, lv], loss) = fusion_loss(&params, &g, &l, &target);
    let grads = tape.backward(loss);
    let step = 1e-5;

    for (name, var) in &names {
        let analytic: Vec<f64> = grads.get(*var).unwrap().iter().copied().collect();
        let base = params.get(name).unwrap().clone();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut p = params.clone();
            let m = p.get_mut(name).unwrap();
            let idx = (i / base.ncols(), i % base.ncols());
            m[idx] = base[idx] + step;
            let up = fusion_loss(&p, &g, &l, &target).0;
            p.get_mut(name).unwrap()[idx] = base[idx] - step;
            let down = fusion_loss(&p, &g, &l, &target).0;
            numeric.push((up - down) / (2.0 * step));
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }

    for (which, var, input) in [("global", gv, &g), ("local", lv, &l)] {
        let analytic: Vec<f64> = grads.get(var).unwrap().iter().copied().collect();
        let mut numeric = Vec::new();
        for i in 0..input.len() {
            let idx = (i / input.ncols(), i % input.ncols());
            let mut up = input.clone();
            up[idx] += step;
            let mut down = input.clone();
            down[idx] -= step;
            let (fu, fd) = if which == "global" {
                (fusion_loss(&params, &up, &l, &target).0, fusion_loss(&params, &down, &l, &target).0)
            } else {
                (fusion_loss(&params, &g, &up, &target).0, fusion_loss(&params, &g, &down, &target).0)
            };
            numeric.push((fu - fd) / (2.0 * step));
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "input {which}: relative error {err:e}");
    }
}

fn end_to_end_check(mode: ConditionMode) {
    let cfg = ModelConfig {
        tokens: 4,
        dim: 8,
        fusion_hidden: 8,
        mode,
        base_channels: 8,
        attn_dim: 4,
        blocks: 1,
        vision_input: 8,
        ..ModelConfig::default()
    };
    let model = OutpaintModel::init(cfg, 5).unwrap();
    let batch = common::examples(&model, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise: Vec<StepNoise> = [7usize, 40]
        .iter()
        .map(|&t| StepNoise { t, eps: randn(&mut rng, 4, 3, 1.0) })
        .collect();
    let flags = AblationFlags::FULL;
    let out = loss_and_grads(&model, &batch, &noise, flags).unwrap();
    let step = 1e-5;

    for (name, value) in model.params().iter() {
        // a spread of entries per matrix keeps the check fast
        let stride = (value.len() / 6).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in (0..value.len()).step_by(stride) {
            let idx = (i / value.ncols(), i % value.ncols());
            let mut up = model.clone();
            up.params_mut().get_mut(name).unwrap()[idx] += step;
            let mut down = model.clone();
            down.params_mut().get_mut(name).unwrap()[idx] -= step;
            let fu = loss_and_grads(&up, &batch, &noise, flags).unwrap().loss;
            let fd = loss_and_grads(&down, &batch, &noise, flags).unwrap().loss;
            numeric.push((fu - fd) / (2.0 * step));
            analytic.push(out.grads.get(name).unwrap()[idx]);
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "{} {name}: relative error {err:e}", mode.name());
    }
}

#[test]
fn end_to_end_gradients_match_central_differences_dual() {
    end_to_end_check(ConditionMode::Dual);
}

#[test]
fn end_to_end_gradients_match_central_differences_other_modes() {
    end_to_end_check(ConditionMode::AllInMlp);
    end_to_end_check(ConditionMode::AllInXattn);
}
