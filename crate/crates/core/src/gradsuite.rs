//! Finite-difference checks for every differentiable building block and the
//! full Desk-model loss. The model case runs without the style mixture.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::Preset;
use crate::error::Result;
use crate::model::{forward, init_model, ModelConfig};
use crate::numerics::{finite_difference_gradient, GradReport, Graph, ParamSet, Tensor, Var};
use crate::objective::{bce, scl, total_loss, LossConfig};
use crate::peft::{adapter_forward, lora_forward, AdapterLayer, LoraLayer};
use crate::rng::{stream, Rng};
use crate::style_mix::{mix_styles, MixConfig};
use crate::Mode;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub const CASES: [&str; 7] = ["cdc_apply", "adapter_forward", "lora_forward", "mix_styles", "bce", "scl", "desk_model_loss"];

fn randn(shape: &[usize], scale: f64, rng: &mut Rng) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Contracts `out` against a fixed random tensor so every output entry
/// contributes a distinct weight to the scalar.
fn weighted_sum(g: &mut Graph, out: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let weights = g.constant(randn(&shape, 1.0, rng)?);
    let prod = g.mul(out, weights)?;
    g.sum(prod)
}

fn run(label: &str, params: &ParamSet, eps: f64, tol: f64, seed: u64, build: impl Fn(&mut Graph, &ParamSet, &mut Rng) -> Result<Var>) -> Result<GradReport> {
    let report = finite_difference_gradient(
        |g, p| {
            let mut rng = stream(seed, "gradcheck.weights");
            build(g, p, &mut rng)
        },
        params,
        eps,
        tol,
    )?;
    Ok(report.with_label(label))
}

fn check_cdc(seed: u64, eps: f64, tol: f64) -> Result<GradReport> {
    let mut rng = stream(seed, "gradcheck.cdc");
    let mut p = ParamSet::new();
    p.insert("x", randn(&[2, 3, 4, 5], 1.0, &mut rng)?, true)?;
    p.insert("w", randn(&[2, 3, 3, 3], 0.5, &mut rng)?, true)?;
    run("cdc_apply", &p, eps, tol, seed, |g, p, rng| {
        let x = g.param(p, "x")?;
        let w = g.param(p, "w")?;
        let out = g.cdc(x, w)?;
        weighted_sum(g, out, rng)
    })
}

/// Desk parameters restricted to `keep`, with every trainable tensor redrawn
/// so zero-initialized factors do not hide gradients.
fn desk_subset(seed: u64, keep: impl Fn(&str) -> bool) -> Result<(ModelConfig, ParamSet)> {
    let model = ModelConfig::preset(Preset::Desk);
    let full = init_model(&model, seed)?;
    let mut rng = stream(seed, "gradcheck.redraw");
    let mut out = ParamSet::new();
    for (name, tensor) in full.iter() {
        if !keep(name) {
            continue;
        }
        let trainable = full.is_trainable(name);
        let value = if trainable { randn(tensor.shape(), 0.2, &mut rng)? } else { tensor.clone() };
        out.insert(name, value, trainable)?;
    }
    Ok((model, out))
}

fn check_adapter(seed: u64, eps: f64, tol: f64) -> Result<GradReport> {
    let (model, p) = desk_subset(seed, |n| n.starts_with("backbone.blocks.0.mlp") || n.starts_with("peft.blocks.0.adapter"))?;
    let grid = model.backbone.grid();
    let mut rng = stream(seed, "gradcheck.adapter");
    let h = randn(&[2, model.backbone.num_tokens(), model.backbone.dim], 1.0, &mut rng)?;
    run("adapter_forward", &p, eps, tol, seed, move |g, p, rng| {
        let hv = g.constant(h.clone());
        let layer = AdapterLayer::bind(g, p, 0)?;
        let out = adapter_forward(g, p, 0, hv, &layer, grid)?;
        weighted_sum(g, out, rng)
    })
}

fn check_lora(seed: u64, eps: f64, tol: f64) -> Result<GradReport> {
    let mut rng = stream(seed, "gradcheck.lora");
    let mut p = ParamSet::new();
    p.insert("h", randn(&[2, 5, 8], 1.0, &mut rng)?, true)?;
    p.insert("w", randn(&[8, 8], 0.3, &mut rng)?, false)?;
    p.insert("down", randn(&[8, 3], 0.3, &mut rng)?, true)?;
    p.insert("up", randn(&[3, 8], 0.3, &mut rng)?, true)?;
    run("lora_forward", &p, eps, tol, seed, |g, p, rng| {
        let h = g.param(p, "h")?;
        let w = g.param(p, "w")?;
        let down = g.param(p, "down")?;
        let up = g.param(p, "up")?;
        let layer = LoraLayer::new(g, down, up)?;
        let out = lora_forward(g, h, w, &layer)?;
        weighted_sum(g, out, rng)
    })
}

fn check_mix(seed: u64, eps: f64, tol: f64) -> Result<GradReport> {
    let mut rng = stream(seed, "gradcheck.mix");
    let mut p = ParamSet::new();
    p.insert("f", randn(&[3, 6, 4], 1.0, &mut rng)?, true)?;
    p.insert("f_tilde", randn(&[3, 6, 4], 2.0, &mut rng)?, true)?;
    let delta: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
    let config = MixConfig::default();
    run("mix_styles", &p, eps, tol, seed, move |g, p, rng| {
        let f = g.param(p, "f")?;
        let ft = g.param(p, "f_tilde")?;
        let out = mix_styles(g, f, ft, &delta, &config)?;
        weighted_sum(g, out, rng)
    })
}

fn check_bce(seed: u64, eps: f64, tol: f64) -> Result<GradReport> {
    let mut rng = stream(seed, "gradcheck.bce");
    let mut p = ParamSet::new();
    p.insert("z", randn(&[6], 3.0, &mut rng)?, true)?;
    let labels = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    run("bce", &p, eps, tol, seed, move |g, p, _| {
        let z = g.param(p, "z")?;
        bce(g, z, &labels)
    })
}

fn check_scl(seed: u64, eps: f64, tol: f64) -> Result<GradReport> {
    let mut rng = stream(seed, "gradcheck.scl");
    let mut p = ParamSet::new();
    p.insert("features", randn(&[6, 5], 1.0, &mut rng)?, true)?;
    let labels = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    run("scl", &p, eps, tol, seed, move |g, p, _| {
        let f = g.param(p, "features")?;
        Ok(scl(g, f, &labels, 5.0)?.0)
    })
}

fn check_model(seed: u64, eps: f64, tol: f64) -> Result<GradReport> {
    let (model, p) = desk_subset(seed, |_| true)?;
    let mut rng = stream(seed, "gradcheck.images");
    let size = model.backbone.image_size;
    let images = Tensor::from_fn(&[3, 3, size, size], |_| rng.random_range(0.0..1.0))?;
    let labels = [0.0, 0.0, 1.0];
    let loss = LossConfig { lambda: 0.5, margin: model.default_margin() };
    run("desk_model_loss", &p, eps, tol, seed, move |g, p, _| {
        let out = forward(g, p, &model, &images, Mode::Train, None)?;
        Ok(total_loss(g, out.logits, out.features, &labels, &loss)?.0)
    })
}

/// Runs one named case.
pub fn check_case(name: &str, seed: u64, eps: f64, tolerance: f64) -> Result<GradReport> {
    match name {
        "cdc_apply" => check_cdc(seed, eps, tolerance),
        "adapter_forward" => check_adapter(seed, eps, tolerance),
        "lora_forward" => check_lora(seed, eps, tolerance),
        "mix_styles" => check_mix(seed, eps, tolerance),
        "bce" => check_bce(seed, eps, tolerance),
        "scl" => check_scl(seed, eps, tolerance),
        "desk_model_loss" => check_model(seed, eps, tolerance),
        other => Err(crate::Error::UnknownKey(other.to_string())),
    }
}

/// Every case in [`CASES`] order.
pub fn gradient_suite(seed: u64, eps: f64, tolerance: f64) -> Result<Vec<GradReport>> {
    CASES.iter().map(|c| check_case(c, seed, eps, tolerance)).collect()
}
