//! Central finite-difference verification of every analytic gradient.
//!
//! The numeric side evaluates the forward pass only, so it is independent
//! of the backward rules it checks. Comparison uses relative error with an
//! absolute floor for near-zero derivatives: an element passes when
//! `|a - n| <= 1e-7` or `|a - n| / max(|a|, |n|) <= 1e-4`.

use crate::distill::{
    transformer_stage_loss, Ablation, CosineGranularity, DistillConfig, Projection,
};
use crate::encoder::{EncoderConfig, EncoderModel, ForwardTrace};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, Stage};
use crate::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-6;

/// Outcome of one gradient check. `worst_rel` is the effective relative
/// error (zero when the absolute difference is under the near-zero floor).
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub worst_rel: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<44} {:>12.3e}  {}",
            self.name,
            self.worst_rel,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

/// Compare an analytic gradient against central differences at selected
/// coordinates of `x0`.
pub fn check_gradient_at(
    name: &str,
    x0: &[f64],
    analytic: &[f64],
    indices: &[usize],
    mut eval: impl FnMut(&[f64]) -> f64,
) -> CheckReport {
    assert_eq!(x0.len(), analytic.len(), "gradient length mismatch in {name}");
    let mut report = CheckReport {
        name: name.to_string(),
        worst_rel: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        checked: indices.len(),
        passed: true,
    };
    let mut first = true;
    for &i in indices {
        let mut xp = x0.to_vec();
        xp[i] += FD_STEP;
        let mut xm = x0.to_vec();
        xm[i] -= FD_STEP;
        let numeric = (eval(&xp) - eval(&xm)) / (2.0 * FD_STEP);
        let a = analytic[i];
        let abs_err = (a - numeric).abs();
        let eff = if abs_err <= ABS_FLOOR { 0.0 } else { abs_err / a.abs().max(numeric.abs()) };
        if first || eff > report.worst_rel {
            report.worst_rel = eff;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
            first = false;
        }
    }
    report.passed = report.worst_rel <= REL_TOL;
    report
}

/// Check every coordinate.
pub fn check_gradient(
    name: &str,
    x0: &[f64],
    analytic: &[f64],
    eval: impl FnMut(&[f64]) -> f64,
) -> CheckReport {
    let indices: Vec<usize> = (0..x0.len()).collect();
    check_gradient_at(name, x0, analytic, &indices, eval)
}

/// Check the gradient of a tape-built scalar function of one tensor.
/// `corrupt` injects a deliberate error into the analytic gradient; the
/// fault-injection hook used to exercise the failure path.
pub fn check_tape_fn(
    name: &str,
    x0: &[f64],
    shape: &[usize],
    corrupt: bool,
    build: &dyn Fn(&Tape, &Tensor) -> Result<Tensor>,
) -> CheckReport {
    let tape = Tape::new();
    let x = Tensor::param(x0.to_vec(), shape).expect("valid check shape");
    let loss = build(&tape, &x).expect("check function builds");
    assert!(loss.is_scalar(), "check function for {name} must produce a scalar");
    tape.backward(&loss).expect("backward on check function");
    let mut analytic = x.grad().expect("checked tensor participates");
    if corrupt {
        analytic[0] += 1e-2;
    }
    check_gradient(name, x0, &analytic, |v| {
        let tape = Tape::new();
        let xt = Tensor::new(v.to_vec(), shape).expect("valid check shape");
        build(&tape, &xt).expect("check function builds").item()
    })
}

/// Which family of gradients to verify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Losses,
    Encoder,
    End2End,
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scope> {
        match s {
            "losses" => Ok(Scope::Losses),
            "encoder" => Ok(Scope::Encoder),
            "end2end" => Ok(Scope::End2End),
            other => Err(Error::Config(format!(
                "unknown grad-check scope {other:?}; expected losses, encoder or end2end"
            ))),
        }
    }
}

/// Run all checks of one scope. `fault` corrupts the analytic gradient of
/// every check whose name contains the given substring.
pub fn run_scope(scope: Scope, seed: u64, fault: Option<&str>) -> Vec<CheckReport> {
    match scope {
        Scope::Losses => losses_checks(seed, fault),
        Scope::Encoder => encoder_checks(seed, fault),
        Scope::End2End => {
            let mut out = pipeline_checks(seed, fault);
            out.extend(projection_fixture_checks(seed, fault));
            out
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random vector bounded away from zero norm, for angular-distance inputs.
fn rand_vec_nonzero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = rand_vec(rng, n, -2.0, 2.0);
        if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 0.3 {
            return v;
        }
    }
}

struct Runner<'a> {
    fault: Option<&'a str>,
    reports: Vec<CheckReport>,
}

impl<'a> Runner<'a> {
    fn new(fault: Option<&'a str>) -> Runner<'a> {
        Runner { fault, reports: Vec::new() }
    }

    fn check(
        &mut self,
        name: &str,
        x0: &[f64],
        shape: &[usize],
        build: &dyn Fn(&Tape, &Tensor) -> Result<Tensor>,
    ) {
        let corrupt = self.fault.is_some_and(|f| name.contains(f));
        self.reports.push(check_tape_fn(name, x0, shape, corrupt, build));
    }
}

fn losses_checks(seed: u64, fault: Option<&str>) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Runner::new(fault);

    let y = Tensor::new(rand_vec_nonzero(&mut rng, 5), &[5]).unwrap();
    let x0 = rand_vec_nonzero(&mut rng, 5);
    r.check("angular_distance/dx", &x0, &[5], &|tape, x| losses::angular_distance(tape, x, &y));
    let x = Tensor::new(rand_vec_nonzero(&mut rng, 5), &[5]).unwrap();
    let y0 = rand_vec_nonzero(&mut rng, 5);
    r.check("angular_distance/dy", &y0, &[5], &|tape, yv| losses::angular_distance(tape, &x, yv));

    let teacher = Tensor::new(rand_vec_nonzero(&mut rng, 6), &[6]).unwrap();
    let negs: Vec<Tensor> =
        (0..3).map(|_| Tensor::new(rand_vec_nonzero(&mut rng, 6), &[6]).unwrap()).collect();
    let z0 = rand_vec_nonzero(&mut rng, 6);
    r.check("cos_nce/d_student", &z0, &[6], &|tape, z| losses::cos_nce(tape, z, &teacher, &negs));

    let teacher_logits = Tensor::new(rand_vec(&mut rng, 4, -2.0, 2.0), &[4]).unwrap();
    let tau = rng.gen_range(0.6..2.0);
    let s0 = rand_vec(&mut rng, 4, -2.0, 2.0);
    r.check("soft_loss/d_student", &s0, &[4], &|tape, s| {
        losses::soft_loss(tape, s, &teacher_logits, tau)
    });

    let mut onehot = vec![0.0; 4];
    onehot[rng.gen_range(0..4)] = 1.0;
    let onehot = Tensor::new(onehot, &[4]).unwrap();
    let s0 = rand_vec(&mut rng, 4, -2.0, 2.0);
    r.check("hard_loss/d_student", &s0, &[4], &|tape, s| losses::hard_loss(tape, s, &onehot, 1.1));
    let s0 = rand_vec(&mut rng, 4, -2.0, 2.0);
    r.check("hard_loss_plain/d_student", &s0, &[4], &|tape, s| {
        losses::hard_loss_plain(tape, s, &onehot)
    });

    let (yt, yl) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let p0 = rand_vec(&mut rng, 1, -2.0, 2.0);
    r.check("regression_soft/d_pred", &p0, &[1], &|tape, p| {
        losses::regression_losses(tape, p, yt, yl).map(|(s, _)| s)
    });
    r.check("regression_hard/d_pred", &p0, &[1], &|tape, p| {
        losses::regression_losses(tape, p, yt, yl).map(|(_, h)| h)
    });

    let teacher_mat = Tensor::new(rand_vec(&mut rng, 12, -2.0, 2.0), &[3, 4]).unwrap();
    let m0 = rand_vec(&mut rng, 12, -2.0, 2.0);
    r.check("mse_layer_loss/d_student", &m0, &[3, 4], &|tape, m| {
        losses::mse_layer_loss(tape, m, &teacher_mat)
    });

    let weights = LossWeights::new(1.0, 1.0, 3.0, 1.1).unwrap();
    let (c_soft, c_hard) = (Tensor::scalar(0.7), Tensor::scalar(0.2));
    let t0 = rand_vec(&mut rng, 1, 0.0, 2.0);
    r.check("combine/d_l_transformer", &t0, &[1], &|tape, lt| {
        losses::combine(tape, lt, &c_soft, &c_hard, &weights, Stage::Stage2).map(|(t, _)| t)
    });
    let (c_tr, c_hard2) = (Tensor::scalar(1.3), Tensor::scalar(0.2));
    r.check("combine/d_l_soft", &t0, &[1], &|tape, ls| {
        losses::combine(tape, &c_tr, ls, &c_hard2, &weights, Stage::Stage2).map(|(t, _)| t)
    });
    let (c_tr2, c_soft2) = (Tensor::scalar(1.3), Tensor::scalar(0.7));
    r.check("combine/d_l_hard", &t0, &[1], &|tape, lh| {
        losses::combine(tape, &c_tr2, &c_soft2, lh, &weights, Stage::Stage2).map(|(t, _)| t)
    });

    r.reports
}

fn encoder_checks(seed: u64, fault: Option<&str>) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Runner::new(fault);

    // weighted sum against fixed random weights turns any output into a
    // scalar objective sensitive to every element
    let w32 = Tensor::new(rand_vec(&mut rng, 6, -1.0, 1.0), &[3, 2]).unwrap();
    let w34 = Tensor::new(rand_vec(&mut rng, 12, -1.0, 1.0), &[3, 4]).unwrap();
    let w43 = Tensor::new(rand_vec(&mut rng, 12, -1.0, 1.0), &[4, 3]).unwrap();
    let w23 = Tensor::new(rand_vec(&mut rng, 6, -1.0, 1.0), &[2, 3]).unwrap();
    let w4 = Tensor::new(rand_vec(&mut rng, 4, -1.0, 1.0), &[4]).unwrap();
    let w35 = Tensor::new(rand_vec(&mut rng, 15, -1.0, 1.0), &[3, 5]).unwrap();
    let w33 = Tensor::new(rand_vec(&mut rng, 9, -1.0, 1.0), &[3, 3]).unwrap();
    let w24 = Tensor::new(rand_vec(&mut rng, 8, -1.0, 1.0), &[2, 4]).unwrap();

    let b_const = Tensor::new(rand_vec(&mut rng, 8, -2.0, 2.0), &[4, 2]).unwrap();
    let x0 = rand_vec(&mut rng, 12, -2.0, 2.0);
    r.check("matmul/da", &x0, &[3, 4], &|tape, a| {
        let out = tape.matmul(a, &b_const)?;
        tape.sum(&tape.mul(&out, &w32)?)
    });
    let a_const = Tensor::new(rand_vec(&mut rng, 12, -2.0, 2.0), &[3, 4]).unwrap();
    let x0 = rand_vec(&mut rng, 8, -2.0, 2.0);
    r.check("matmul/db", &x0, &[4, 2], &|tape, b| {
        let out = tape.matmul(&a_const, b)?;
        tape.sum(&tape.mul(&out, &w32)?)
    });

    let x0 = rand_vec(&mut rng, 12, -2.0, 2.0);
    r.check("transpose/dx", &x0, &[3, 4], &|tape, x| {
        tape.sum(&tape.mul(&tape.transpose(x)?, &w43)?)
    });

    let other = Tensor::new(rand_vec(&mut rng, 6, -2.0, 2.0), &[2, 3]).unwrap();
    let x0 = rand_vec(&mut rng, 6, -2.0, 2.0);
    r.check("add/da", &x0, &[2, 3], &|tape, a| tape.sum(&tape.mul(&tape.add(a, &other)?, &w23)?));
    r.check("add/db", &x0, &[2, 3], &|tape, b| tape.sum(&tape.mul(&tape.add(&other, b)?, &w23)?));
    r.check("sub/da", &x0, &[2, 3], &|tape, a| tape.sum(&tape.mul(&tape.sub(a, &other)?, &w23)?));
    r.check("sub/db", &x0, &[2, 3], &|tape, b| tape.sum(&tape.mul(&tape.sub(&other, b)?, &w23)?));
    r.check("mul/da", &x0, &[2, 3], &|tape, a| tape.sum(&tape.mul(&tape.mul(a, &other)?, &w23)?));
    r.check("mul/db", &x0, &[2, 3], &|tape, b| tape.sum(&tape.mul(&tape.mul(&other, b)?, &w23)?));

    let denom = Tensor::new(rand_vec(&mut rng, 6, 0.5, 2.5), &[2, 3]).unwrap();
    r.check("div/da", &x0, &[2, 3], &|tape, a| tape.sum(&tape.mul(&tape.div(a, &denom)?, &w23)?));
    let numer = Tensor::new(rand_vec(&mut rng, 6, -2.0, 2.0), &[2, 3]).unwrap();
    let d0 = rand_vec(&mut rng, 6, 0.5, 2.5);
    r.check("div/db", &d0, &[2, 3], &|tape, b| tape.sum(&tape.mul(&tape.div(&numer, b)?, &w23)?));

    r.check("scale/dx", &x0, &[2, 3], &|tape, x| {
        tape.sum(&tape.mul(&tape.scale(x, -1.37)?, &w23)?)
    });
    r.check("add_scalar/dx", &x0, &[2, 3], &|tape, x| {
        tape.sum(&tape.mul(&tape.add_scalar(x, 0.61)?, &w23)?)
    });

    let row_const = Tensor::new(rand_vec(&mut rng, 4, -2.0, 2.0), &[4]).unwrap();
    let x0 = rand_vec(&mut rng, 12, -2.0, 2.0);
    r.check("add_row/dx", &x0, &[3, 4], &|tape, x| {
        tape.sum(&tape.mul(&tape.add_row(x, &row_const)?, &w34)?)
    });
    let mat_const = Tensor::new(rand_vec(&mut rng, 12, -2.0, 2.0), &[3, 4]).unwrap();
    let r0 = rand_vec(&mut rng, 4, -2.0, 2.0);
    r.check("add_row/drow", &r0, &[4], &|tape, row| {
        tape.sum(&tape.mul(&tape.add_row(&mat_const, row)?, &w34)?)
    });

    let x0 = rand_vec(&mut rng, 6, -2.0, 2.0);
    r.check("sum/dx", &x0, &[6], &|tape, x| tape.sum(x));
    r.check("mean/dx", &x0, &[6], &|tape, x| tape.mean(x));
    let n0 = rand_vec_nonzero(&mut rng, 6);
    r.check("norm/dx", &n0, &[6], &|tape, x| tape.norm(x));
    let l0 = rand_vec(&mut rng, 6, 0.5, 2.5);
    let w6 = Tensor::new(rand_vec(&mut rng, 6, -1.0, 1.0), &[6]).unwrap();
    r.check("log/dx", &l0, &[6], &|tape, x| tape.sum(&tape.mul(&tape.log(x)?, &w6)?));

    let x0 = rand_vec(&mut rng, 6, -2.0, 2.0);
    r.check("softmax/dx", &x0, &[2, 3], &|tape, x| {
        tape.sum(&tape.mul(&tape.softmax(x, 1.3)?, &w23)?)
    });
    r.check("gelu/dx", &x0, &[2, 3], &|tape, x| tape.sum(&tape.mul(&tape.gelu(x)?, &w23)?));

    let gain = Tensor::new(rand_vec(&mut rng, 4, 0.5, 1.5), &[4]).unwrap();
    let bias = Tensor::new(rand_vec(&mut rng, 4, -0.5, 0.5), &[4]).unwrap();
    let x0 = rand_vec(&mut rng, 12, -2.0, 2.0);
    r.check("layer_norm/dx", &x0, &[3, 4], &|tape, x| {
        tape.sum(&tape.mul(&tape.layer_norm(x, &gain, &bias)?, &w34)?)
    });
    let ln_x = Tensor::new(rand_vec(&mut rng, 12, -2.0, 2.0), &[3, 4]).unwrap();
    let g0 = rand_vec(&mut rng, 4, 0.5, 1.5);
    r.check("layer_norm/dgain", &g0, &[4], &|tape, g| {
        tape.sum(&tape.mul(&tape.layer_norm(&ln_x, g, &bias)?, &w34)?)
    });
    let b0 = rand_vec(&mut rng, 4, -0.5, 0.5);
    r.check("layer_norm/dbias", &b0, &[4], &|tape, b| {
        tape.sum(&tape.mul(&tape.layer_norm(&ln_x, &gain, b)?, &w34)?)
    });

    let ids = vec![0usize, 2, 2, 4];
    let t0 = rand_vec(&mut rng, 15, -2.0, 2.0);
    let w43b = Tensor::new(rand_vec(&mut rng, 12, -1.0, 1.0), &[4, 3]).unwrap();
    r.check("embed/dtable", &t0, &[5, 3], &|tape, t| {
        tape.sum(&tape.mul(&tape.embed(t, &ids)?, &w43b)?)
    });

    let x0 = rand_vec(&mut rng, 12, -2.0, 2.0);
    r.check("row/dx", &x0, &[3, 4], &|tape, x| tape.sum(&tape.mul(&tape.row(x, 1)?, &w4)?));

    let x0 = rand_vec(&mut rng, 18, -2.0, 2.0);
    r.check("col_slice/dx", &x0, &[3, 6], &|tape, x| {
        tape.sum(&tape.mul(&tape.col_slice(x, 1, 3)?, &w33)?)
    });

    let part_const = Tensor::new(rand_vec(&mut rng, 9, -2.0, 2.0), &[3, 3]).unwrap();
    let x0 = rand_vec(&mut rng, 6, -2.0, 2.0);
    r.check("col_concat/dpart", &x0, &[3, 2], &|tape, p| {
        let cat = tape.col_concat(&[p.clone(), part_const.clone()])?;
        tape.sum(&tape.mul(&cat, &w35)?)
    });

    let x0 = rand_vec(&mut rng, 12, -2.0, 2.0);
    r.check("reshape/dx", &x0, &[2, 6], &|tape, x| {
        tape.sum(&tape.mul(&tape.reshape(x, &[3, 4])?, &w34)?)
    });

    // composite random graph: reshape -> matmul -> softmax -> norm
    let graph_const = Tensor::new(rand_vec(&mut rng, 12, -1.5, 1.5), &[3, 4]).unwrap();
    let x0 = rand_vec(&mut rng, 6, -2.0, 2.0);
    r.check("graph/matmul_softmax_norm", &x0, &[6], &|tape, x| {
        let m = tape.matmul(&tape.reshape(x, &[2, 3])?, &graph_const)?;
        let s = tape.softmax(&m, 1.0)?;
        tape.norm(&tape.mul(&s, &w24)?)
    });

    r.reports
}

fn sample_indices(n: usize) -> Vec<usize> {
    let mut idx = vec![0];
    if n > 2 {
        idx.push(n / 2);
    }
    if n > 1 {
        idx.push(n - 1);
    }
    if n > 4 {
        idx.push(1);
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Full-pipeline gradient checks: the combined distillation loss of a tiny
/// teacher/student pair, differentiated against a sample of coordinates of
/// every trainable tensor.
fn pipeline_checks(seed: u64, fault: Option<&str>) -> Vec<CheckReport> {
    let teacher_cfg = EncoderConfig {
        vocab_size: 8,
        max_len: 4,
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        ffn_size: 12,
        num_classes: 2,
    };
    let student_cfg = EncoderConfig {
        hidden_size: 4,
        num_heads: 2,
        ffn_size: 8,
        ..teacher_cfg.clone()
    };
    let teacher = EncoderModel::init(&teacher_cfg, seed ^ 0xbeef).expect("valid config");
    let student = EncoderModel::init(&student_cfg, seed ^ 0xfeed).expect("valid config");
    let projection = Projection::init(4, 8, 2, seed ^ 0xabba);
    let cfg = DistillConfig {
        negatives: 2,
        batch_size: 4,
        ..DistillConfig::baseline(vec![1, 2], 10, seed)
    };

    let tokens = vec![3usize, 4, 5, 6];
    let neg_tokens = [vec![4usize, 4, 3, 7], vec![6usize, 5, 3, 3]];
    let t_main = teacher.forward_detached(&tokens).expect("teacher forward");
    let t_negs: Vec<ForwardTrace> =
        neg_tokens.iter().map(|t| teacher.forward_detached(t).expect("teacher forward")).collect();
    let onehot = Tensor::new(vec![0.0, 1.0], &[2]).unwrap();
    let weights = LossWeights::new(1.0, 1.0, 3.0, cfg.tau).unwrap();

    let loss_fn = |tape: &Tape| -> Result<Tensor> {
        let trace = student.forward(tape, &tokens, None)?;
        let neg_refs: Vec<&ForwardTrace> = t_negs.iter().collect();
        let lt = transformer_stage_loss(tape, &trace, &t_main, &neg_refs, &projection, &cfg)?;
        let ls = losses::soft_loss(tape, &trace.logits, &t_main.logits, cfg.tau)?;
        let lh = losses::hard_loss(tape, &trace.logits, &onehot, cfg.tau)?;
        Ok(losses::combine(tape, &lt, &ls, &lh, &weights, Stage::Stage2)?.0)
    };

    let tape = Tape::new();
    let loss = loss_fn(&tape).expect("pipeline loss builds");
    tape.backward(&loss).expect("pipeline backward");

    let mut trainables = student.parameters();
    trainables.extend(projection.parameters());
    let mut reports = Vec::new();
    for (name, tensor) in &trainables {
        let check_name = format!("pipeline/{name}");
        let x0 = tensor.value();
        let mut analytic = tensor.grad().unwrap_or_else(|| vec![0.0; x0.len()]);
        if fault.is_some_and(|f| check_name.contains(f)) {
            analytic[0] += 1e-2;
        }
        let indices = sample_indices(x0.len());
        let report = check_gradient_at(&check_name, &x0, &analytic, &indices, |v| {
            tensor.data_mut(|d| d.copy_from_slice(v));
            let tape = Tape::new();
            loss_fn(&tape).expect("pipeline loss builds").item()
        });
        tensor.data_mut(|d| d.copy_from_slice(&x0));
        reports.push(report);
    }
    reports
}

/// The projection-matrix fixture: sequence length 2, student width 3,
/// teacher width 4, two negatives. Checks every coordinate of `W`.
pub fn projection_fixture_checks(seed: u64, fault: Option<&str>) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d, dt, k) = (2usize, 3usize, 4usize, 2usize);

    let fake_trace = |ffn: Tensor| ForwardTrace {
        emb_out: Tensor::zeros(&[l, d]),
        ffn_outs: vec![ffn],
        logits: Tensor::zeros(&[2]),
    };
    let student_trace =
        fake_trace(Tensor::new(rand_vec_nonzero(&mut rng, l * d), &[l, d]).unwrap());
    let teacher_trace =
        fake_trace(Tensor::new(rand_vec_nonzero(&mut rng, l * dt), &[l, dt]).unwrap());
    let neg_traces: Vec<ForwardTrace> = (0..k)
        .map(|_| fake_trace(Tensor::new(rand_vec_nonzero(&mut rng, l * dt), &[l, dt]).unwrap()))
        .collect();
    let w0 = rand_vec_nonzero(&mut rng, d * dt);

    let mut reports = Vec::new();
    for (granularity, label) in [
        (CosineGranularity::Whole, "transformer_stage_loss/dw_fixture"),
        (CosineGranularity::PerTokenMean, "transformer_stage_loss/dw_fixture_per_token"),
    ] {
        let cfg = DistillConfig {
            cosine_granularity: granularity,
            negatives: k,
            batch_size: k + 1,
            ablation: Ablation::Full,
            ..DistillConfig::baseline(vec![1], 10, seed)
        };
        let corrupt = fault.is_some_and(|f| label.contains(f));
        let student_trace = &student_trace;
        let teacher_trace = &teacher_trace;
        let neg_traces = &neg_traces;
        let cfg_ref = &cfg;
        reports.push(check_tape_fn(label, &w0, &[d, dt], corrupt, &move |tape, w| {
            let projection = Projection { mats: vec![w.clone()] };
            let neg_refs: Vec<&ForwardTrace> = neg_traces.iter().collect();
            transformer_stage_loss(tape, student_trace, teacher_trace, &neg_refs, &projection, cfg_ref)
        }));
    }
    reports
}
