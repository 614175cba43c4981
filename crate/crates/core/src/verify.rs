//! The invariant suite: causality under perturbation, slice equivalence,
//! finite-difference gradients, the cost oracle and the selector oracle.
//!
//! Every check returns a [`CheckReport`]; [`run_all`] bundles them together
//! with a negative control that corrupts one mask and expects the causality
//! check to notice.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::grid::Grid;
use crate::nested::{ConvBn, NestedModel};
use crate::numerics::{
    fd_gradient_check, BatchNorm, BinaryMask, GradCheckReport, MaskedConvKernel, OpCounter, Rng, Scalar, Tensor,
};
use crate::slicing::{cost, select_slice, slice, Budget, SliceCost, SliceId};
use crate::training::{aggregate_loss, aggregate_loss_with_grad, head_loss, LossWeightMatrix, WeightKind};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    /// Largest observed deviation (0 for exact checks that passed).
    pub max_error: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    /// Random inputs per equivalence and causality sweep.
    pub inputs: usize,
    /// Parameters sampled by the gradient check.
    pub grad_samples: usize,
    pub grad_batch: usize,
    pub selector_trials: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            inputs: 100,
            grad_samples: 300,
            grad_batch: 4,
            selector_trials: 1000,
            seed: 0,
        }
    }
}

/// Standard-normal inputs shaped for `model`.
pub fn random_inputs<S: Scalar>(model: &NestedModel<S>, count: usize, rng: &mut Rng) -> Result<Tensor<S>> {
    let a = model.arch();
    let shape = [count, a.input_channels, a.input_hw, a.input_hw];
    let n = shape.iter().product();
    Tensor::from_vec(&shape, (0..n).map(|_| S::from_f64(rng.normal())).collect())
}

fn noise<S: Scalar>(v: &mut S, rng: &mut Rng) {
    *v = *v + S::from_f64(0.5 + rng.normal());
}

/// Perturbs every connection of `cb` outside its causal mask and every
/// output channel from `keep` on.
fn perturb_conv_bn<S: Scalar>(cb: &mut ConvBn<S>, keep: usize, rng: &mut Rng) {
    let mask = cb.layer.kernel().mask().clone();
    let [_, ci, k, _] = mask.shape();
    let row = ci * k * k;
    for (idx, w) in cb.layer.weights_mut().data_mut().iter_mut().enumerate() {
        if idx / row >= keep || !mask.bits()[idx] {
            noise(w, rng);
        }
    }
    perturb_bn(&mut cb.bn, keep, rng);
}

fn perturb_bn<S: Scalar>(bn: &mut BatchNorm<S>, keep: usize, rng: &mut Rng) {
    for c in keep..bn.channels() {
        noise(&mut bn.gamma[c], rng);
        noise(&mut bn.beta[c], rng);
        noise(&mut bn.running_mean[c], rng);
        bn.running_var[c] = bn.running_var[c] + S::from_f64(0.5 + rng.uniform());
    }
}

/// Rewrites everything head `(d, w)` must not depend on: blocks and heads
/// past layer group `d`, channels of groups past `w`, and masked weights.
fn perturb_outside<S: Scalar>(model: &mut NestedModel<S>, d: usize, w: usize, rng: &mut Rng) {
    let groups = model.group_spec().clone();
    let sites = model.site_positions().to_vec();
    let last_pos = sites[d - 1];
    perturb_conv_bn(model.stem_mut(), groups.retained(0, w), rng);
    for (i, b) in model.blocks_mut().iter_mut().enumerate() {
        let keep = if i < last_pos { groups.retained(b.stage(), w) } else { 0 };
        perturb_conv_bn(&mut b.conv1, keep, rng);
        perturb_conv_bn(&mut b.conv2, keep, rng);
        if let Some(s) = &mut b.shortcut {
            perturb_conv_bn(s, keep, rng);
        }
    }
    let arch = model.arch().clone();
    for (l, h) in model.heads_mut().iter_mut().enumerate() {
        let keep = if l < d { groups.retained(arch.site_stage(sites[l]), w) } else { 0 };
        let f = h.features();
        for (idx, v) in h.weight.data_mut().iter_mut().enumerate() {
            if idx % f >= keep {
                noise(v, rng);
            }
        }
        if keep == 0 {
            for v in h.bias.data_mut() {
                noise(v, rng);
            }
        }
    }
}

/// For every `(d, w)`: perturbs activations of channel groups `> w` after
/// every block and all weights outside the `(d, w)` cone, then requires
/// every head `(l ≤ d, c ≤ w)` to be bit-identical to the clean model.
pub fn causality<S: Scalar>(model: &NestedModel<S>, x: &Tensor<S>, seed: u64) -> Result<CheckReport> {
    let clean = model.forward_grid(x)?;
    let batch = x.shape()[0];
    let (layers, groups) = (model.layers(), model.groups());
    let spec = model.group_spec().clone();
    let arch = model.arch().clone();
    let mut rng = Rng::new(seed);
    let mut violations = Vec::new();
    let mut max_error = 0.0f64;
    for d in 1..=layers {
        for w in 1..=groups {
            let mut m = model.clone();
            perturb_outside(&mut m, d, w, &mut rng);
            let mut hook_rng = Rng::with_stream(seed, (d * groups + w) as u64);
            let mut hook = |pos: usize, data: &mut [S], channels: usize| {
                let keep = spec.retained(arch.site_stage(pos), w);
                let plane = data.len() / (batch * channels);
                for b in 0..batch {
                    for c in keep..channels {
                        for v in &mut data[(b * channels + c) * plane..][..plane] {
                            noise(v, &mut hook_rng);
                        }
                    }
                }
            };
            let grid = m.forward_grid_perturbed(x, &mut hook)?;
            for l in 1..=d {
                for c in 1..=w {
                    let (a, b) = (clean.head(l, c)?, grid.head(l, c)?);
                    let same = a.iter().zip(b).all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits());
                    if !same {
                        let diff = a.iter().zip(b).map(|(p, q)| (p.as_f64() - q.as_f64()).abs()).fold(0.0, f64::max);
                        max_error = max_error.max(if diff.is_nan() { f64::INFINITY } else { diff });
                        violations.push((d, w, l, c));
                    }
                }
            }
        }
    }
    Ok(CheckReport {
        name: "causality",
        passed: violations.is_empty(),
        max_error,
        detail: match violations.first() {
            None => format!("{layers}x{groups} perturbation cones, all heads inside unchanged"),
            Some((d, w, l, c)) => format!(
                "{} violations; first: head ({l}, {c}) changed under perturbation outside ({d}, {w})",
                violations.len()
            ),
        },
    })
}

/// Slices every `(d, w)` and compares its output with
/// [`NestedModel::forward_head`] bit for bit.
pub fn slice_equivalence<S: Scalar>(model: &NestedModel<S>, x: &Tensor<S>) -> Result<CheckReport> {
    let mut frozen = model.clone();
    frozen.freeze();
    let mut max_error = 0.0f64;
    let mut mismatched = Vec::new();
    for d in 1..=frozen.layers() {
        for w in 1..=frozen.groups() {
            let sliced = slice(&frozen, SliceId { d, w })?;
            let a = sliced.forward(x)?;
            let b = frozen.forward_head(x, d, w)?;
            if !a.bit_eq(&b) {
                max_error = max_error.max(a.max_abs_diff(&b).unwrap_or(f64::INFINITY));
                mismatched.push((d, w));
            }
        }
    }
    Ok(CheckReport {
        name: "slice equivalence",
        passed: mismatched.is_empty(),
        max_error,
        detail: format!(
            "{} slices x {} inputs, {} mismatched {:?}",
            frozen.layers() * frozen.groups(),
            x.shape()[0],
            mismatched.len(),
            mismatched
        ),
    })
}

/// Result of [`gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub report: GradCheckReport,
    /// Masked weight positions whose analytic gradient is not exactly zero.
    pub masked_nonzero: usize,
}

/// Analytic gradient of the aggregate training-mode loss, computed in `S`,
/// against central differences taken on a 64-bit copy of the same weights.
///
/// `samples` unmasked parameters are drawn, spread evenly over the
/// parameter tensors.
pub fn gradients<S: Scalar>(
    model: &NestedModel<S>,
    x: &Tensor<f64>,
    labels: &[usize],
    weights: &LossWeightMatrix,
    samples: usize,
    epsilon: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradientCheck> {
    let mut tape = crate::nested::Tape::new();
    let logits = model.forward_train(&x.convert::<S>(), &mut tape)?;
    let agg = aggregate_loss_with_grad(&logits, labels, weights)?;
    let grads = model.backward(&mut tape, &agg.grad)?;

    let mut rng = Rng::new(seed);
    let mut analytic = Vec::new();
    let mut indices = Vec::new();
    let mut masked_nonzero = 0;
    let params = model.params();
    let per_tensor = samples.div_ceil(params.len().max(1));
    for ((_, p), g) in params.iter().zip(&grads.tensors) {
        let base = analytic.len();
        analytic.extend(g.iter().map(|v| v.as_f64()));
        let free: Vec<usize> = match p.mask {
            Some(m) => {
                masked_nonzero += m.bits().iter().zip(g).filter(|(&b, v)| !b && v.as_f64() != 0.0).count();
                (0..g.len()).filter(|&i| m.bits()[i]).collect()
            }
            None => (0..g.len()).collect(),
        };
        let mut pool = free;
        rng.shuffle(&mut pool);
        indices.extend(pool.into_iter().take(per_tensor).map(|i| base + i));
    }
    indices.sort_unstable();

    let mut reference = model.convert::<f64>();
    let mut flat = reference.flat_params();
    let report = fd_gradient_check(
        &mut flat,
        &analytic,
        |p| {
            reference.set_flat_params(p).expect("same layout");
            let mut t = crate::nested::Tape::new();
            let grid = reference.forward_train(x, &mut t).expect("valid input");
            let losses = head_loss(&grid, labels).expect("valid labels");
            aggregate_loss(&losses, weights).expect("matching shape")
        },
        epsilon,
        tolerance,
        Some(&indices),
    );
    Ok(GradientCheck {
        report,
        masked_nonzero,
    })
}

/// Analytic cost of every slice against brute force: nonzero retained mask
/// positions for parameters, and the instrumented forward passes of both
/// the sliced model and the full model for MACs and peak memory. Also
/// checks weak monotonicity of every component in `d` and `w`.
pub fn cost_oracle<S: Scalar>(model: &NestedModel<S>) -> Result<CheckReport> {
    let mut frozen = model.clone();
    frozen.freeze();
    let arch = frozen.arch().clone();
    let spec = frozen.group_spec().clone();
    let hw = arch.input_hw;
    let x = Tensor::<S>::zeros(&[1, arch.input_channels, hw, hw])?;
    let (layers, groups) = (frozen.layers(), frozen.groups());
    let mut table = Vec::with_capacity(layers * groups);
    let mut failures = Vec::new();
    for d in 1..=layers {
        for w in 1..=groups {
            let id = SliceId { d, w };
            let analytic = cost(&arch, &spec, id, hw)?;
            let sliced = slice(&frozen, id)?;
            let mut counter = OpCounter::default();
            sliced.forward_probed(&x, &mut counter)?;
            let mut full_counter = OpCounter::default();
            frozen.forward_head_probed(&x, d, w, &mut full_counter)?;
            let brute = SliceCost {
                params: enumerate_params(&frozen, id) as u64,
                macs: counter.macs,
                peak_activation: counter.peak as u64,
            };
            let consistent = analytic == brute
                && sliced.param_count() as u64 == analytic.params
                && full_counter.macs == analytic.macs
                && full_counter.peak as u64 == analytic.peak_activation;
            if !consistent {
                failures.push(format!("{id}: analytic {analytic:?} vs measured {brute:?}"));
            }
            table.push(analytic);
        }
    }
    let t = Grid::from_vec(layers, groups, table).expect("sized above");
    let mono = |a: &SliceCost, b: &SliceCost| {
        a.params <= b.params && a.macs <= b.macs && a.peak_activation <= b.peak_activation
    };
    for d in 0..layers {
        for w in 0..groups {
            if d + 1 < layers && !mono(&t[(d, w)], &t[(d + 1, w)]) {
                failures.push(format!("not monotone in d at ({}, {})", d + 1, w + 1));
            }
            if w + 1 < groups && !mono(&t[(d, w)], &t[(d, w + 1)]) {
                failures.push(format!("not monotone in w at ({}, {})", d + 1, w + 1));
            }
        }
    }
    Ok(CheckReport {
        name: "cost oracle",
        passed: failures.is_empty(),
        max_error: failures.len() as f64,
        detail: if failures.is_empty() {
            format!("{} slices: params, MACs and peak memory match, monotone", layers * groups)
        } else {
            failures.join("; ")
        },
    })
}

/// Parameters of slice `id` counted from the full model's masks.
fn enumerate_params<S: Scalar>(model: &NestedModel<S>, id: SliceId) -> usize {
    let spec = model.group_spec();
    let count = |cb: &ConvBn<S>, out: usize, inp: usize| {
        let m = cb.layer.kernel().mask();
        let [_, ci, k, _] = m.shape();
        let mut n = 0;
        for o in 0..out {
            for i in 0..inp.min(ci) {
                for y in 0..k {
                    for xx in 0..k {
                        n += usize::from(m.get(o, i, y, xx));
                    }
                }
            }
        }
        n + 2 * out
    };
    let last_pos = model.site_positions()[id.d - 1];
    let mut ch = spec.retained(0, id.w);
    let mut total = count(model.stem(), ch, model.arch().input_channels);
    for b in &model.blocks()[..last_pos] {
        let out = spec.retained(b.stage(), id.w);
        total += count(&b.conv1, out, ch) + count(&b.conv2, out, out);
        if let Some(s) = &b.shortcut {
            total += count(s, out, ch);
        }
        ch = out;
    }
    total + model.classes() * ch + model.classes()
}

/// Random cost and score tables with frequent ties and random budgets,
/// compared with an exhaustive sort-based scan.
pub fn selector_oracle(trials: usize, seed: u64) -> CheckReport {
    let mut rng = Rng::new(seed);
    let mut mismatches = 0;
    let mut infeasible = 0;
    let mut first = String::new();
    for t in 0..trials {
        let rows = 1 + rng.below(5) as usize;
        let cols = 1 + rng.below(5) as usize;
        let costs = Grid::from_fn(rows, cols, |_, _| SliceCost {
            params: rng.below(20),
            macs: rng.below(20),
            peak_activation: rng.below(20),
        });
        let scores = Grid::from_fn(rows, cols, |_, _| {
            if rng.below(10) == 0 {
                f64::NAN
            } else {
                rng.below(5) as f64 / 4.0
            }
        });
        let mut limit = || if rng.below(3) == 0 { None } else { Some(rng.below(24)) };
        let budget = Budget {
            max_macs: limit(),
            max_params: limit(),
            max_peak_activation: limit(),
        };
        let got = select_slice(&costs, &scores, &budget).expect("matching shapes");
        let want = exhaustive_select(&costs, &scores, &budget);
        if want.is_none() {
            infeasible += 1;
        }
        if got != want {
            if mismatches == 0 {
                first = format!("trial {t}: got {got:?}, expected {want:?}");
            }
            mismatches += 1;
        }
    }
    CheckReport {
        name: "selector oracle",
        passed: mismatches == 0,
        max_error: mismatches as f64,
        detail: if mismatches == 0 {
            format!("{trials} random instances ({infeasible} infeasible) agree with exhaustive scan")
        } else {
            format!("{mismatches} mismatches; {first}")
        },
    }
}

fn exhaustive_select(costs: &Grid<SliceCost>, scores: &Grid<f64>, budget: &Budget) -> Option<SliceId> {
    let mut feasible: Vec<(f64, u64, u64, usize, usize)> = costs
        .iter()
        .filter(|((r, c), cost)| !scores[(*r, *c)].is_nan() && budget.admits(cost))
        .map(|((r, c), cost)| (scores[(r, c)], cost.macs, cost.params, r + 1, c + 1))
        .collect();
    feasible.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then((a.3, a.4).cmp(&(b.3, b.4)))
    });
    feasible.first().map(|f| SliceId { d: f.3, w: f.4 })
}

/// Copy of `model` whose first block's first convolution connects every
/// input channel to every output channel.
pub fn with_corrupted_mask<S: Scalar>(model: &NestedModel<S>, seed: u64) -> Result<NestedModel<S>> {
    let mut bad = model.clone();
    let mut rng = Rng::new(seed);
    let target = match bad.blocks_mut().first_mut() {
        Some(b) => &mut b.conv1,
        None => bad.stem_mut(),
    };
    let k = target.layer.kernel();
    let shape = k.mask().shape();
    let (stride, padding) = (k.stride(), k.padding());
    let mut weights = k.weights().clone();
    for v in weights.data_mut() {
        if *v == S::zero() {
            *v = S::from_f64(rng.normal());
        }
    }
    let mask = BinaryMask::from_fn(shape, |_, _, _, _| true);
    target
        .layer
        .replace_kernel_unchecked(MaskedConvKernel::new(weights, mask, stride, padding)?);
    Ok(bad)
}

/// A check that could not run counts as failed.
fn settle(name: &'static str, r: Result<CheckReport>) -> CheckReport {
    r.unwrap_or_else(|e| CheckReport {
        name,
        passed: false,
        max_error: f64::INFINITY,
        detail: format!("could not run: {e}"),
    })
}

/// Runs every check on `model`. Errors raised inside a check (for example
/// slicing a model whose mask is not causal) are reported as failures.
pub fn run_all<S: Scalar>(model: &NestedModel<S>, config: &VerifyConfig) -> Result<VerifyReport> {
    let mut rng = Rng::new(config.seed);
    let x = random_inputs(model, config.inputs, &mut rng)?;
    let mut checks = vec![
        settle("causality", causality(model, &x, config.seed)),
        settle("slice equivalence", slice_equivalence(model, &x)),
    ];

    let gx = random_inputs(&model.convert::<f64>(), config.grad_batch, &mut rng)?;
    let labels: Vec<usize> = (0..config.grad_batch).map(|_| rng.below(model.classes() as u64) as usize).collect();
    let lam = LossWeightMatrix::make(WeightKind::Descend { gamma: 2.0 }, model.layers(), model.groups())?;
    let tolerance = if S::BYTES == 4 { 1e-3 } else { 1e-6 };
    let g = gradients(model, &gx, &labels, &lam, config.grad_samples, 1e-5, tolerance, config.seed).map(|g| CheckReport {
        name: "finite-difference gradients",
        passed: g.report.passed && g.masked_nonzero == 0,
        max_error: g.report.max_rel_err,
        detail: format!(
            "{} sampled parameters, tolerance {:e}, {} masked weights with nonzero gradient",
            g.report.checked(),
            tolerance,
            g.masked_nonzero
        ),
    });
    checks.push(settle("finite-difference gradients", g));
    checks.push(settle("cost oracle", cost_oracle(model)));
    checks.push(selector_oracle(config.selector_trials, config.seed));

    let bad = with_corrupted_mask(model, config.seed)?;
    let probe_x = random_inputs(model, 4, &mut rng)?;
    let detected = !causality(&bad, &probe_x, config.seed)?.passed;
    let mut frozen_bad = bad;
    frozen_bad.freeze();
    let rejected = slice(&frozen_bad, SliceId { d: 1, w: 1 }).is_err();
    checks.push(CheckReport {
        name: "negative control",
        passed: detected && rejected,
        max_error: 0.0,
        detail: format!("corrupted mask detected by causality: {detected}, rejected by slicing: {rejected}"),
    });
    Ok(VerifyReport { checks })
}
