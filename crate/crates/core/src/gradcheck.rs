//! Central-difference validation of analytic gradients, plus the suite that
//! sweeps every differentiable operation and the full training objective.

use crate::model::{
    gate_features, overall_loss, target_attention_loss, tem_forward, AblationConfig, ModelConfig,
    ModelParams, TalVariant, TemParams,
};
use crate::ops::{self, BatchNorm2dParams, Conv2dParams};
use crate::rng::{sample_seed, SplitMix64};
use crate::tensor::{backward_pass, Graph, Tensor};
use crate::{Error, Result};

/// Max over coordinates of |analytic - central difference| normalized by
/// max(1, |analytic|, |numeric|). `f` must build a scalar loss from its
/// input on the given graph.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    finite_difference_check_sampled(f, x, eps, usize::MAX, 0)
}

/// Like [`finite_difference_check`] but limited to `max_coords` randomly
/// chosen coordinates, for inputs too large to sweep exhaustively.
pub fn finite_difference_check_sampled<F>(
    f: F,
    x: &Tensor,
    eps: f32,
    max_coords: usize,
    seed: u64,
) -> Result<f32>
where
    F: Fn(&mut Graph, &Tensor) -> Result<Tensor>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite difference eps must lie in [1e-4, 1e-2] for 32-bit arithmetic, got {eps}"
        )));
    }
    let shape = x.shape();
    let base = x.to_vec();

    // analytic gradient via one recorded forward + backward
    let probe = Tensor::param(shape.clone(), base.clone());
    let mut g = Graph::new();
    let loss = f(&mut g, &probe)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape()));
    }
    backward_pass(&mut g, &loss)?;
    let analytic = probe.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let n = base.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        let mut rng = SplitMix64::new(seed);
        rng.shuffle(&mut all);
        all.truncate(max_coords);
        all
    };

    let eval = |vals: Vec<f32>| -> Result<f64> {
        let xt = Tensor::new(shape.clone(), vals);
        let mut g = Graph::new();
        let loss = f(&mut g, &xt)?;
        Ok(loss.item() as f64)
    };

    let mut max_rel = 0.0f64;
    for i in coords {
        let vp = base[i] + eps;
        let vm = base[i] - eps;
        let mut plus = base.clone();
        plus[i] = vp;
        let fp = eval(plus)?;
        let mut minus = base.clone();
        minus[i] = vm;
        let fm = eval(minus)?;
        // use the realized f32 step, not 2*eps
        let h = (vp - vm) as f64;
        let numeric = (fp - fm) / h;
        let a = analytic[i] as f64;
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient check coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel as f32)
}

/// Outcome of one suite entry.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f32,
    pub tolerance: f32,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi) as f32).collect())
}

/// Values bounded away from zero on both sides (for the relu kink).
fn rand_tensor_off_zero(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let mag = rng.uniform(0.2, 1.2) as f32;
                if rng.bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
    )
}

const OP_TOL: f32 = 1e-2;
const FULL_MODEL_TOL: f32 = 2e-2;

/// Runs the finite-difference suite: every differentiable op on `reps`
/// random small inputs, then the full objective with respect to the TEM
/// head weights on a random 2-sample batch.
pub fn run_op_suite(seed: u64, reps: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut run = |name: &str,
                   tol: f32,
                   reps: usize,
                   check: &mut dyn FnMut(&mut SplitMix64) -> Result<f32>|
     -> Result<()> {
        let mut rng = SplitMix64::new(sample_seed(seed, out.len() as u64, 0, 0));
        let mut worst = 0.0f32;
        for _ in 0..reps {
            worst = worst.max(check(&mut rng)?);
        }
        out.push(CheckOutcome {
            name: name.to_string(),
            max_rel_err: worst,
            tolerance: tol,
        });
        Ok(())
    };

    run("add", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
        let other = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let s = ops::add(g, x, &other)?;
                ops::sum_all(g, &s)
            },
            &x,
            1e-3,
        )
    })?;

    run("mul", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
        let other = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let m = ops::mul(g, x, &other)?;
                ops::sum_all(g, &m)
            },
            &x,
            1e-3,
        )
    })?;

    run("mul_aliased_square", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![4], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let m = ops::mul(g, x, x)?;
                ops::sum_all(g, &m)
            },
            &x,
            1e-3,
        )
    })?;

    run("scale", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![5], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let s = ops::scale(g, x, 0.37)?;
                ops::sum_all(g, &s)
            },
            &x,
            1e-3,
        )
    })?;

    run("one_minus", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![5], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let s = ops::one_minus(g, x)?;
                let sq = ops::mul(g, &s, &s)?;
                ops::sum_all(g, &sq)
            },
            &x,
            1e-3,
        )
    })?;

    run("mean_all", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let sq = ops::mul(g, x, x)?;
                ops::mean_all(g, &sq)
            },
            &x,
            1e-3,
        )
    })?;

    run("reshape", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![2, 6], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let r = ops::reshape(g, x, vec![3, 4])?;
                let sq = ops::mul(g, &r, &r)?;
                ops::sum_all(g, &sq)
            },
            &x,
            1e-3,
        )
    })?;

    run("channel_mean", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![2, 3, 2, 2], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let m = ops::channel_mean(g, x)?;
                let sq = ops::mul(g, &m, &m)?;
                ops::sum_all(g, &sq)
            },
            &x,
            1e-3,
        )
    })?;

    run("concat_cols", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
        let other = rand_tensor(rng, vec![2, 2], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let c = ops::concat_cols(g, &[x.clone(), other.clone()])?;
                let sq = ops::mul(g, &c, &c)?;
                ops::sum_all(g, &sq)
            },
            &x,
            1e-3,
        )
    })?;

    run("stripe_at", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![2, 3, 4], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let s = ops::stripe_at(g, x, 1)?;
                let sq = ops::mul(g, &s, &s)?;
                ops::sum_all(g, &sq)
            },
            &x,
            1e-3,
        )
    })?;

    run("relu", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor_off_zero(rng, vec![3, 4]);
        finite_difference_check(
            |g, x| {
                let r = ops::relu(g, x)?;
                let sq = ops::mul(g, &r, &r)?;
                ops::sum_all(g, &sq)
            },
            &x,
            1e-3,
        )
    })?;

    run("sigmoid", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![3, 4], -3.0, 3.0);
        finite_difference_check(
            |g, x| {
                let s = ops::sigmoid(g, x)?;
                ops::sum_all(g, &s)
            },
            &x,
            1e-3,
        )
    })?;

    // conv2d on a random 2x5x4 input, 3x3 kernel, pad 1
    let conv_fixed_w = {
        let mut rng = SplitMix64::new(sample_seed(seed, 101, 0, 0));
        rand_tensor(&mut rng, vec![3, 2, 3, 3], -0.5, 0.5)
    };
    let conv_fixed_b = {
        let mut rng = SplitMix64::new(sample_seed(seed, 102, 0, 0));
        rand_tensor(&mut rng, vec![3], -0.5, 0.5)
    };
    run("conv2d_input", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![1, 2, 5, 4], -1.0, 1.0);
        let w = conv_fixed_w.clone();
        let b = conv_fixed_b.clone();
        finite_difference_check(
            move |g, x| {
                let p = Conv2dParams::new(w.clone(), Some(b.clone()), 1, 1)?;
                let y = ops::conv2d(g, x, &p)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::mean_all(g, &sq)
            },
            &x,
            1e-2,
        )
    })?;

    run("conv2d_weight", OP_TOL, reps, &mut |rng| {
        let x0 = rand_tensor(rng, vec![1, 2, 5, 4], -1.0, 1.0);
        let w = rand_tensor(rng, vec![3, 2, 3, 3], -0.5, 0.5);
        let b = conv_fixed_b.clone();
        finite_difference_check(
            move |g, w| {
                let p = Conv2dParams::new(w.clone(), Some(b.clone()), 1, 1)?;
                let y = ops::conv2d(g, &x0, &p)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::mean_all(g, &sq)
            },
            &w,
            1e-2,
        )
    })?;

    run("conv2d_bias", OP_TOL, reps, &mut |rng| {
        let x0 = rand_tensor(rng, vec![1, 2, 5, 4], -1.0, 1.0);
        let w = conv_fixed_w.clone();
        let b = rand_tensor(rng, vec![3], -0.5, 0.5);
        finite_difference_check(
            move |g, b| {
                let p = Conv2dParams::new(w.clone(), Some(b.clone()), 1, 1)?;
                let y = ops::conv2d(g, &x0, &p)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::mean_all(g, &sq)
            },
            &b,
            1e-2,
        )
    })?;

    run("batch_norm_input", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![2, 3, 2, 2], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let p = BatchNorm2dParams::new(3);
                let y = ops::batch_norm2d(g, x, &p, true)?;
                let w = rand_fixed_weights(y.numel());
                let wt = Tensor::new(y.shape(), w);
                let m = ops::mul(g, &y, &wt)?;
                ops::sum_all(g, &m)
            },
            &x,
            1e-2,
        )
    })?;

    run("batch_norm_gamma_beta", OP_TOL, reps, &mut |rng| {
        let x0 = rand_tensor(rng, vec![2, 3, 2, 2], -1.0, 1.0);
        let gamma = rand_tensor(rng, vec![3], 0.5, 1.5);
        let beta0 = rand_tensor(rng, vec![3], -0.5, 0.5);
        let err_g = finite_difference_check(
            |g, gamma| {
                let mut p = BatchNorm2dParams::new(3);
                p.gamma = gamma.clone();
                p.beta = beta0.clone();
                let y = ops::batch_norm2d(g, &x0, &p, true)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::sum_all(g, &sq)
            },
            &gamma,
            1e-2,
        )?;
        let err_b = finite_difference_check(
            |g, beta| {
                let mut p = BatchNorm2dParams::new(3);
                p.beta = beta.clone();
                let y = ops::batch_norm2d(g, &x0, &p, true)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::sum_all(g, &sq)
            },
            &beta0,
            1e-2,
        )?;
        Ok(err_g.max(err_b))
    })?;

    run("linear", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![4], -1.0, 1.0);
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, vec![3], -1.0, 1.0);
        let e1 = finite_difference_check(
            |g, x| {
                let y = ops::linear(g, x, &w, &b)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::sum_all(g, &sq)
            },
            &x,
            1e-3,
        )?;
        let e2 = finite_difference_check(
            |g, w| {
                let y = ops::linear(g, &x, w, &b)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::sum_all(g, &sq)
            },
            &w,
            1e-3,
        )?;
        let e3 = finite_difference_check(
            |g, b| {
                let y = ops::linear(g, &x, &w, b)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::sum_all(g, &sq)
            },
            &b,
            1e-3,
        )?;
        Ok(e1.max(e2).max(e3))
    })?;

    run("stripe_avg_pool", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![1, 2, 7, 3], -1.0, 1.0);
        finite_difference_check(
            |g, x| {
                let p = ops::stripe_avg_pool(g, x, 3)?;
                let sq = ops::mul(g, &p, &p)?;
                ops::sum_all(g, &sq)
            },
            &x,
            1e-3,
        )
    })?;

    run("broadcast_mul", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![1, 3, 2, 2], -1.0, 1.0);
        let m = rand_tensor(rng, vec![1, 1, 2, 2], 0.1, 0.9);
        let e1 = finite_difference_check(
            |g, x| {
                let y = ops::broadcast_mul(g, x, &m)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::sum_all(g, &sq)
            },
            &x,
            1e-3,
        )?;
        let e2 = finite_difference_check(
            |g, m| {
                let y = ops::broadcast_mul(g, &x, m)?;
                let sq = ops::mul(g, &y, &y)?;
                ops::sum_all(g, &sq)
            },
            &m,
            1e-3,
        )?;
        Ok(e1.max(e2))
    })?;

    run("spatial_l2_normalize", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor_off_zero(rng, vec![1, 2, 3, 2]);
        finite_difference_check(
            |g, x| {
                let y = ops::spatial_l2_normalize(g, x, 1e-12)?;
                let w = rand_fixed_weights(y.numel());
                let wt = Tensor::new(y.shape(), w);
                let m = ops::mul(g, &y, &wt)?;
                ops::sum_all(g, &m)
            },
            &x,
            1e-2,
        )
    })?;

    run("softmax_cross_entropy", OP_TOL, reps, &mut |rng| {
        let x = rand_tensor(rng, vec![5], -2.0, 2.0);
        let target = rng.below(5);
        finite_difference_check(
            move |g, x| ops::softmax_cross_entropy(g, x, &[target]),
            &x,
            1e-3,
        )
    })?;

    // attention module end to end: Zf mean as the probe loss. The BN shifts
    // are biased positive so epsilon probes do not cross the relu kink.
    let tem_small = {
        let mut rng = SplitMix64::new(sample_seed(seed, 103, 0, 0));
        let tem = TemParams::init(&mut rng, 8, 4);
        tem.bias_away_from_relu_kink(0.5);
        tem
    };
    run("tem_forward_input", OP_TOL, 3, &mut |rng| {
        let f = rand_tensor(rng, vec![2, 8, 4, 3], 0.0, 1.0);
        let tem = tem_small.clone();
        finite_difference_check_sampled(
            move |g, f| {
                let zf = tem_forward(g, f, &tem, true)?;
                let sq = ops::mul(g, &zf, &zf)?;
                ops::sum_all(g, &sq)
            },
            &f,
            1e-3,
            48,
            sample_seed(seed, 104, 0, 0),
        )
    })?;

    run("tem_forward_head_weight", OP_TOL, 3, &mut |rng| {
        let f = rand_tensor(rng, vec![2, 8, 4, 3], 0.0, 1.0);
        let w = rand_tensor(rng, vec![4, 128, 1, 1], -0.5, 0.5);
        let tem = tem_small.clone();
        finite_difference_check_sampled(
            move |g, w| {
                let t = tem.with_head_weight(w.clone())?;
                let zf = tem_forward(g, &f, &t, true)?;
                let sq = ops::mul(g, &zf, &zf)?;
                ops::sum_all(g, &sq)
            },
            &w,
            1e-3,
            48,
            sample_seed(seed, 105, 0, 0),
        )
    })?;

    run("gate_features", OP_TOL, reps, &mut |rng| {
        let f = rand_tensor(rng, vec![1, 2, 3, 2], -1.0, 1.0);
        let b = rand_tensor(rng, vec![1, 2, 3, 2], -1.0, 1.0);
        let zf = rand_tensor(rng, vec![1, 1, 3, 2], 0.1, 0.9);
        finite_difference_check(
            |g, zf| {
                let (fg, bg) = gate_features(g, &f, Some(&b), zf, true)?;
                let s1 = ops::sum_all(g, &fg)?;
                let s2 = ops::sum_all(g, bg.as_ref().expect("interaction on"))?;
                ops::add(g, &s1, &s2)
            },
            &zf,
            1e-3,
        )
    })?;

    run("target_attention_loss", OP_TOL, reps, &mut |rng| {
        // random 2x4x3 features per the contract example
        let f0 = rand_tensor_off_zero(rng, vec![2, 4, 3]);
        let b0 = rand_tensor_off_zero(rng, vec![2, 4, 3]);
        let zf0 = rand_tensor(rng, vec![1, 4, 3], 0.1, 0.9);
        let mut worst = 0.0f32;
        for variant in [TalVariant::Full, TalVariant::V1, TalVariant::V2] {
            let (b, zf) = (b0.clone(), zf0.clone());
            worst = worst.max(finite_difference_check(
                move |g, f| target_attention_loss(g, f, &b, &zf, variant),
                &f0,
                1e-2,
            )?);
            let (f, zf) = (f0.clone(), zf0.clone());
            worst = worst.max(finite_difference_check(
                move |g, b| target_attention_loss(g, &f, b, &zf, variant),
                &b0,
                1e-2,
            )?);
            let (f, b) = (f0.clone(), b0.clone());
            worst = worst.max(finite_difference_check(
                move |g, zf| target_attention_loss(g, &f, &b, zf, variant),
                &zf0,
                1e-2,
            )?);
        }
        Ok(worst)
    })?;

    // full objective with respect to the TEM head weights, 2-sample batch
    run("full_model_tem_head", FULL_MODEL_TOL, 1, &mut |rng| {
        let mut cfg = ModelConfig::desk(4, 3);
        cfg.input_h = 64;
        cfg.input_w = 16;
        cfg.ablation = AblationConfig::full();
        cfg.ablation.k = 16;
        cfg.ablation.embed_dim = 8;
        let params = ModelParams::init(cfg.clone(), sample_seed(seed, 106, 0, 0))?;
        let len = 2 * 3 * 64 * 16;
        let x = Tensor::new(
            vec![2, 3, 64, 16],
            (0..len).map(|_| rng.next_f64() as f32).collect(),
        );
        let pids = vec![rng.below(4), rng.below(4)];
        let cids = vec![rng.below(3), rng.below(3)];
        let head_w = params
            .tem
            .as_ref()
            .expect("full config has the attention module")
            .head
            .weight
            .detach();
        let ablation = cfg.ablation.clone();
        finite_difference_check_sampled(
            move |g, w| {
                let p = params.with_tem_head_weight(w.clone())?;
                let out = p.forward(g, &x, true)?;
                let losses = overall_loss(g, &out, &pids, &cids, &ablation)?;
                Ok(losses.total)
            },
            &head_w,
            1e-2,
            24,
            sample_seed(seed, 107, 0, 0),
        )
    })?;

    Ok(out)
}

/// Deterministic pseudo-random weights so probe losses are not symmetric
/// in coordinates (a plain sum can hide sign errors).
fn rand_fixed_weights(n: usize) -> Vec<f32> {
    let mut rng = SplitMix64::new(0x77EE_55AA);
    (0..n).map(|_| rng.uniform(0.25, 1.75) as f32).collect()
}
