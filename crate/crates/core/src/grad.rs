//! Analytic gradients of the trial score and a finite-difference oracle.
//!
//! Gradients are taken w.r.t. the packed test vector, every stored
//! enrollment vector of the model, and `log(alpha)`. The backward pass runs
//! through the joint softmax (every weight depends on every query and key),
//! the global normalization, the per-vector L2 Jacobians and layer
//! normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::enroll::{build_enrollment, EnrollAgg, EnrollMaterial, EnrollmentModel};
use crate::error::{Error, Result};
use crate::layout::{LayoutConfig, PackedEmbedding};
use crate::normalize::{dot, l2_backward, norm, LayerNormParams, NormMode, EPS};
use crate::score::{
    check_trial, effective_enroll_vectors, enroll_side, forward, global_norms, prepare, score_trial, EnrollSide,
    Forward, Prepared, Role, ScoreMethod, ScoringConfig, TestSide,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradient {
    pub d_test: Vec<f64>,
    /// One entry per stored vector of the enrollment model.
    pub d_enroll: Vec<Vec<f64>>,
    pub d_log_alpha: f64,
}

impl ScoreGradient {
    /// All coordinates in a fixed order: test, each enrollment vector, log-alpha.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.d_test.clone();
        for d in &self.d_enroll {
            out.extend_from_slice(d);
        }
        out.push(self.d_log_alpha);
        out
    }
}

/// Gradients of the kernel w.r.t. its (already normalized) inputs.
#[derive(Debug, Clone)]
pub(crate) struct KernelGrad {
    pub score: f64,
    pub d_queries: Vec<f64>,
    pub d_test_values: Vec<f64>,
    pub d_keys: Vec<f64>,
    pub d_enroll_values: Vec<f64>,
    pub d_alpha: f64,
}

pub(crate) fn kernel_grad(test: &TestSide, enroll: &EnrollSide, alpha: f64, global: bool) -> Result<KernelGrad> {
    let fwd = forward(test, enroll, alpha)?;
    kernel_backward(test, enroll, &fwd, alpha, global)
}

pub(crate) fn kernel_backward(
    test: &TestSide,
    enroll: &EnrollSide,
    fwd: &Forward,
    alpha: f64,
    global: bool,
) -> Result<KernelGrad> {
    let (m_count, n_count) = (test.len(), enroll.len());
    let (dk, dv) = (test.key_dim(), test.value_dim());
    let w = fwd.weights.as_slice();

    // Upstream derivative of the score w.r.t. each weight, and the direct
    // value-path scale factors.
    let (score, upstream, value_scale, norms) = if global {
        let g = global_norms(test, enroll, fwd)?;
        let denom = g.a2.sqrt() * g.b2.sqrt();
        let score = fwd.s_att / denom;
        let mut up = Vec::with_capacity(m_count * n_count);
        for m in 0..m_count {
            for n in 0..n_count {
                up.push(
                    fwd.value_dots[m * n_count + n] / denom
                        - 0.5 * score * (g.test_norms2[m] / g.a2 + g.enroll_norms2[n] / g.b2),
                );
            }
        }
        (score, up, 1.0 / denom, Some(g))
    } else {
        (fwd.s_att, fwd.value_dots.clone(), 1.0, None)
    };

    let mean_up: f64 = w.iter().zip(&upstream).map(|(wi, u)| wi * u).sum();
    let logit_grad: Vec<f64> = w.iter().zip(&upstream).map(|(wi, u)| wi * (u - mean_up)).collect();

    let mut d_queries = vec![0.0; m_count * dk];
    let mut d_keys = vec![0.0; n_count * dk];
    let mut d_test_values = vec![0.0; m_count * dv];
    let mut d_enroll_values = vec![0.0; n_count * dv];
    let mut d_alpha = 0.0;
    for m in 0..m_count {
        let (q, t) = (test.query(m), test.value(m));
        for n in 0..n_count {
            let idx = m * n_count + n;
            let g = logit_grad[idx];
            d_alpha += g * fwd.key_dots[idx];
            let (k, e) = (enroll.key(n), enroll.value(n));
            for i in 0..dk {
                d_queries[m * dk + i] += alpha * g * k[i];
                d_keys[n * dk + i] += alpha * g * q[i];
            }
            let wv = w[idx] * value_scale;
            for i in 0..dv {
                d_test_values[m * dv + i] += wv * e[i];
                d_enroll_values[n * dv + i] += wv * t[i];
            }
        }
    }
    if let Some(g) = norms {
        for m in 0..m_count {
            let c = score / g.a2 * g.row_sums[m];
            for (d, t) in d_test_values[m * dv..(m + 1) * dv].iter_mut().zip(test.value(m)) {
                *d -= c * t;
            }
        }
        for n in 0..n_count {
            let c = score / g.b2 * g.col_sums[n];
            for (d, e) in d_enroll_values[n * dv..(n + 1) * dv].iter_mut().zip(enroll.value(n)) {
                *d -= c * e;
            }
        }
    }
    Ok(KernelGrad {
        score: if global { score.clamp(-1.0, 1.0) } else { score },
        d_queries,
        d_test_values,
        d_keys,
        d_enroll_values,
        d_alpha,
    })
}

/// Score and gradient of `cos(test, mean_j(y_j / |y_j|))`.
pub(crate) fn cosine_grad(test: &[f64], enroll: &[&[f64]]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let e_count = enroll.len() as f64;
    let mut units = Vec::with_capacity(enroll.len());
    let mut norms = Vec::with_capacity(enroll.len());
    let mut mean = vec![0.0; test.len()];
    for v in enroll {
        let n = norm(v);
        if !(n >= EPS) {
            return Err(Error::degenerate("enrollment vector norm", n));
        }
        let u: Vec<f64> = v.iter().map(|x| x / n).collect();
        for (a, x) in mean.iter_mut().zip(&u) {
            *a += x / e_count;
        }
        units.push(u);
        norms.push(n);
    }
    let (nx, nm) = (norm(test), norm(&mean));
    if !(nx >= EPS) {
        return Err(Error::degenerate("test vector norm", nx));
    }
    if !(nm >= EPS) {
        return Err(Error::degenerate("mean enrollment norm", nm));
    }
    let x_hat: Vec<f64> = test.iter().map(|x| x / nx).collect();
    let m_hat: Vec<f64> = mean.iter().map(|x| x / nm).collect();
    let s = dot(&x_hat, &m_hat);
    let d_test = m_hat.iter().zip(&x_hat).map(|(m, x)| (m - s * x) / nx).collect();
    let d_mean: Vec<f64> = x_hat
        .iter()
        .zip(&m_hat)
        .map(|(x, m)| (x - s * m) / nm / e_count)
        .collect();
    let d_enroll = units
        .iter()
        .zip(&norms)
        .map(|(u, n)| l2_backward(&d_mean, u, *n))
        .collect();
    Ok((s.clamp(-1.0, 1.0), d_test, d_enroll))
}

/// Score and analytic gradient of [`score_trial`].
pub fn score_grad(
    test_emb: &PackedEmbedding,
    model: &EnrollmentModel,
    cfg: &ScoringConfig,
) -> Result<(f64, ScoreGradient)> {
    check_trial(test_emb, model, cfg)?;
    let effective = effective_enroll_vectors(model, cfg);
    let refs: Vec<&[f64]> = effective.iter().map(Vec::as_slice).collect();
    let (score, d_test, d_effective, d_log_alpha) = match cfg.method {
        ScoreMethod::Cosine => {
            let (s, dt, de) = cosine_grad(&test_emb.vec, &refs)?;
            (s, dt, de, 0.0)
        }
        ScoreMethod::Attentive => {
            let test = prepare(&test_emb.vec, cfg, Role::Test)?;
            let enrolls = refs
                .iter()
                .map(|v| prepare(v, cfg, Role::Enroll))
                .collect::<Result<Vec<_>>>()?;
            let (score, dt, de, da) = attentive_grad(&test, &enrolls, cfg)?;
            (score, dt, de, da * cfg.alpha)
        }
    };
    // Under mean aggregation of a concat model every stored vector receives
    // an equal share of the mean's gradient.
    let stored = model.vectors().len();
    let d_enroll = if d_effective.len() == stored {
        d_effective
    } else {
        debug_assert!(matches!(model.material, EnrollMaterial::Concat(_)));
        let share: Vec<f64> = d_effective[0].iter().map(|d| d / stored as f64).collect();
        vec![share; stored]
    };
    Ok((
        score,
        ScoreGradient {
            d_test,
            d_enroll,
            d_log_alpha,
        },
    ))
}

/// Gradient of the attentive score of prepared utterances w.r.t. the packed
/// test vector, each packed enrollment vector, and alpha.
pub(crate) fn attentive_grad(
    test: &Prepared,
    enrolls: &[Prepared],
    cfg: &ScoringConfig,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>, f64)> {
    let layout = &cfg.layout;
    let refs: Vec<&Prepared> = enrolls.iter().collect();
    let kg = kernel_grad(
        &test.test_side(layout),
        &enroll_side(&refs, layout),
        cfg.alpha,
        cfg.norm == NormMode::KeyAndGlobalL2,
    )?;
    let d_test = test.backward(&kg.d_queries, &kg.d_test_values, cfg, Role::Test);
    let (kstride, vstride) = (layout.num_pairs * layout.key_dim, layout.num_pairs * layout.value_dim);
    let d_enroll = enrolls
        .iter()
        .enumerate()
        .map(|(j, p)| {
            p.backward(
                &kg.d_keys[j * kstride..(j + 1) * kstride],
                &kg.d_enroll_values[j * vstride..(j + 1) * vstride],
                cfg,
                Role::Enroll,
            )
        })
        .collect();
    Ok((kg.score, d_test, d_enroll, kg.d_alpha))
}

/// Central finite differences of [`score_trial`] over every packed
/// coordinate and over `log(alpha)`.
pub fn fd_gradient(
    test_emb: &PackedEmbedding,
    model: &EnrollmentModel,
    cfg: &ScoringConfig,
    h: f64,
) -> Result<ScoreGradient> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * h);

    let mut test = test_emb.clone();
    let mut d_test = Vec::with_capacity(test.vec.len());
    for i in 0..test.vec.len() {
        let x = test.vec[i];
        test.vec[i] = x + h;
        let plus = score_trial(&test, model, cfg)?;
        test.vec[i] = x - h;
        let minus = score_trial(&test, model, cfg)?;
        test.vec[i] = x;
        d_test.push(central(plus, minus));
    }

    let mut perturbed = model.clone();
    let stored = model.vectors().len();
    let mut d_enroll = Vec::with_capacity(stored);
    for j in 0..stored {
        let len = model.layout.total_dim();
        let mut d = Vec::with_capacity(len);
        for i in 0..len {
            let x = stored_vec_mut(&mut perturbed, j)[i];
            stored_vec_mut(&mut perturbed, j)[i] = x + h;
            let plus = score_trial(test_emb, &perturbed, cfg)?;
            stored_vec_mut(&mut perturbed, j)[i] = x - h;
            let minus = score_trial(test_emb, &perturbed, cfg)?;
            stored_vec_mut(&mut perturbed, j)[i] = x;
            d.push(central(plus, minus));
        }
        d_enroll.push(d);
    }

    let log_alpha = cfg.alpha.ln();
    let plus = score_trial(test_emb, model, &cfg.clone().with_alpha((log_alpha + h).exp()))?;
    let minus = score_trial(test_emb, model, &cfg.clone().with_alpha((log_alpha - h).exp()))?;
    Ok(ScoreGradient {
        d_test,
        d_enroll,
        d_log_alpha: central(plus, minus),
    })
}

fn stored_vec_mut(model: &mut EnrollmentModel, j: usize) -> &mut Vec<f64> {
    match &mut model.material {
        EnrollMaterial::Concat(embs) => &mut embs[j].vec,
        EnrollMaterial::Mean(mean) => &mut mean.vec,
    }
}

/// Below this magnitude a coordinate is judged by its absolute error, since
/// central differences carry roundoff near `1e-10` there.
pub const REL_FLOOR: f64 = 1e-3;

/// Outcome of comparing an analytic gradient with a numerical one.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - f| / max(|a|, |f|, REL_FLOOR)` over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate (in [`ScoreGradient::flatten`] order) attaining it.
    pub worst_coord: usize,
    pub max_abs_error: f64,
    pub num_coords: usize,
    /// First coordinate where either gradient is not finite.
    pub non_finite_coord: Option<usize>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite_coord.is_none() && self.max_rel_error < tol
    }
}

pub fn compare_gradients(analytic: &ScoreGradient, numeric: &ScoreGradient) -> Result<GradCheck> {
    let (a, f) = (analytic.flatten(), numeric.flatten());
    if a.len() != f.len() {
        return Err(Error::Dimension(format!(
            "gradients have {} and {} coordinates",
            a.len(),
            f.len()
        )));
    }
    let mut check = GradCheck {
        max_rel_error: 0.0,
        worst_coord: 0,
        max_abs_error: 0.0,
        num_coords: a.len(),
        non_finite_coord: None,
    };
    for (i, (x, y)) in a.iter().zip(&f).enumerate() {
        if !(x.is_finite() && y.is_finite()) {
            check.non_finite_coord.get_or_insert(i);
            continue;
        }
        let abs = (x - y).abs();
        let rel = abs / x.abs().max(y.abs()).max(REL_FLOOR);
        check.max_abs_error = check.max_abs_error.max(abs);
        if rel > check.max_rel_error {
            check.max_rel_error = rel;
            check.worst_coord = i;
        }
    }
    Ok(check)
}

/// Analytic gradient of one trial checked against central differences.
pub fn check_trial_gradient(
    test_emb: &PackedEmbedding,
    model: &EnrollmentModel,
    cfg: &ScoringConfig,
    h: f64,
) -> Result<GradCheck> {
    let (_, analytic) = score_grad(test_emb, model, cfg)?;
    let numeric = fd_gradient(test_emb, model, cfg, h)?;
    compare_gradients(&analytic, &numeric)
}

/// A randomly drawn trial for gradient checking: dimensions, vectors,
/// temperature and (for layer normalization) gain and bias all come from
/// `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCase {
    pub norm: NormMode,
    pub tied: bool,
    pub enroll_utts: usize,
    pub seed: u64,
}

impl GradCase {
    /// Every normalization mode, tied and independent, with one and three
    /// enrollment utterances, for each seed.
    pub fn suite(seeds: std::ops::Range<u64>) -> Vec<GradCase> {
        let mut cases = Vec::new();
        for norm in NormMode::ALL {
            for tied in [true, false] {
                for enroll_utts in [1, 3] {
                    for seed in seeds.clone() {
                        cases.push(GradCase {
                            norm,
                            tied,
                            enroll_utts,
                            seed,
                        });
                    }
                }
            }
        }
        cases
    }

    pub fn instance(&self) -> Result<(PackedEmbedding, EnrollmentModel, ScoringConfig)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let layout = LayoutConfig::new(
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            self.tied,
        )?;
        let dim = layout.total_dim();
        let mut draw = |id: String| PackedEmbedding::new(id, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let test = draw("t".into());
        let embs: Vec<_> = (0..self.enroll_utts).map(|j| draw(format!("e{j}"))).collect();
        let model = build_enrollment(&embs, &layout, EnrollAgg::Concat, "s")?;
        let mut cfg = ScoringConfig::attentive(layout, self.norm).with_alpha(rng.random_range(-1.0f64..1.0).exp());
        if self.norm == NormMode::LayerNorm {
            cfg.layer_norm = Some(LayerNormParams {
                gain: (0..dim).map(|_| rng.random_range(0.5..1.5)).collect(),
                bias: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            });
        }
        Ok((test, model, cfg))
    }

    pub fn run(&self, h: f64) -> Result<GradCheck> {
        let (test, model, cfg) = self.instance()?;
        check_trial_gradient(&test, &model, &cfg, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_emb(rng: &mut ChaCha8Rng, id: &str, len: usize) -> PackedEmbedding {
        PackedEmbedding::new(id, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn instance(seed: u64, layout: LayoutConfig, e: usize, agg: EnrollAgg) -> (PackedEmbedding, EnrollmentModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = layout.total_dim();
        let test = random_emb(&mut rng, "t", dim);
        let embs: Vec<_> = (0..e).map(|j| random_emb(&mut rng, &format!("e{j}"), dim)).collect();
        (test, build_enrollment(&embs, &layout, agg, "s").unwrap())
    }

    #[test]
    fn single_pair_none_gradient_is_enroll_value() {
        let layout = LayoutConfig::tied(1, 2, 3).unwrap();
        let cfg = ScoringConfig::attentive(layout, NormMode::None);
        let test = PackedEmbedding::new("t", vec![0.3, -0.2, 1.0, 2.0, 3.0]);
        let enr = PackedEmbedding::new("e", vec![0.1, 0.4, 0.5, -1.0, 2.0]);
        let model = build_enrollment(&[enr], &layout, EnrollAgg::Concat, "s").unwrap();
        let (_, g) = score_grad(&test, &model, &cfg).unwrap();
        assert_eq!(&g.d_test[2..], &[0.5, -1.0, 2.0]);
        assert_eq!(&g.d_test[..2], &[0.0, 0.0]);
        assert_eq!(g.d_log_alpha, 0.0);

        let fd = fd_gradient(&test, &model, &cfg, 1e-6).unwrap();
        for (a, b) in fd.d_test[2..].iter().zip(&[0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_logits_give_zero_alpha_gradient() {
        // all queries and keys identical, so every logit is equal
        let layout = LayoutConfig::independent(2, 2, 2).unwrap();
        let cfg = ScoringConfig::attentive(layout, NormMode::None);
        let test = PackedEmbedding::new("t", vec![1.0, 1.0, 0.0, 0.0, 1.0, 2.0, 1.0, 1.0, 0.0, 0.0, -1.0, 0.5]);
        let enr = PackedEmbedding::new("e", vec![0.0, 0.0, 0.5, 0.5, 3.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.2, 0.7]);
        let model = build_enrollment(&[enr], &layout, EnrollAgg::Concat, "s").unwrap();
        let (_, g) = score_grad(&test, &model, &cfg).unwrap();
        assert!(g.d_log_alpha.abs() < 1e-15);
    }

    #[test]
    fn analytic_matches_fd_all_modes() {
        for (seed, tied) in [(1, true), (2, false)] {
            for norm in NormMode::ALL {
                for (e, agg) in [(1, EnrollAgg::Concat), (3, EnrollAgg::Concat), (3, EnrollAgg::Mean)] {
                    let layout = LayoutConfig::new(3, 2, 4, tied).unwrap();
                    let (test, model) = instance(seed, layout, e, agg);
                    let cfg = ScoringConfig::attentive(layout, norm).with_alpha(1.3);
                    let (s, g) = score_grad(&test, &model, &cfg).unwrap();
                    assert_eq!(s, score_trial(&test, &model, &cfg).unwrap());
                    let fd = fd_gradient(&test, &model, &cfg, 1e-6).unwrap();
                    let check = compare_gradients(&g, &fd).unwrap();
                    assert!(check.passes(1e-5), "{norm} tied={tied} E={e}: {check:?}");
                }
            }
        }
    }

    #[test]
    fn suite_cases_pass() {
        let cases = GradCase::suite(0..3);
        assert_eq!(cases.len(), 4 * 2 * 2 * 3);
        for case in cases {
            let check = case.run(1e-6).unwrap();
            assert!(check.passes(1e-5), "{case:?}: {check:?}");
        }
    }

    #[test]
    fn coarse_step_is_worse_but_finite() {
        let case = GradCase {
            norm: NormMode::KeyAndGlobalL2,
            tied: true,
            enroll_utts: 3,
            seed: 11,
        };
        let fine = case.run(1e-6).unwrap();
        let coarse = case.run(1e-3).unwrap();
        assert!(coarse.non_finite_coord.is_none() && coarse.max_rel_error.is_finite());
        assert!(coarse.max_abs_error > fine.max_abs_error);
    }

    #[test]
    fn mean_config_over_concat_model_shares_gradient() {
        let layout = LayoutConfig::tied(2, 2, 3).unwrap();
        let (test, model) = instance(9, layout, 3, EnrollAgg::Concat);
        let cfg = ScoringConfig::attentive(layout, NormMode::KeyValueL2).with_enroll_agg(EnrollAgg::Mean);
        let (_, g) = score_grad(&test, &model, &cfg).unwrap();
        let fd = fd_gradient(&test, &model, &cfg, 1e-6).unwrap();
        assert_eq!(g.d_enroll.len(), 3);
        assert!(compare_gradients(&g, &fd).unwrap().passes(1e-5));
    }

    #[test]
    fn cosine_gradient_matches_fd() {
        let layout = LayoutConfig::tied(2, 3, 3).unwrap();
        for agg in [EnrollAgg::Concat, EnrollAgg::Mean] {
            let (test, model) = instance(4, layout, 3, agg);
            let cfg = ScoringConfig::cosine(layout);
            let (_, g) = score_grad(&test, &model, &cfg).unwrap();
            let fd = fd_gradient(&test, &model, &cfg, 1e-6).unwrap();
            assert!(compare_gradients(&g, &fd).unwrap().passes(1e-5));
        }
    }

    #[test]
    fn fd_converges_quadratically() {
        let layout = LayoutConfig::tied(2, 2, 2).unwrap();
        let (test, model) = instance(21, layout, 2, EnrollAgg::Concat);
        let cfg = ScoringConfig::attentive(layout, NormMode::None).with_alpha(2.0);
        let (_, g) = score_grad(&test, &model, &cfg).unwrap();
        let err = |h: f64| {
            let fd = fd_gradient(&test, &model, &cfg, h).unwrap();
            compare_gradients(&g, &fd).unwrap().max_abs_error
        };
        let (coarse, fine) = (err(2e-2), err(1e-2));
        let ratio = coarse / fine;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn global_scaling_of_values_has_zero_directional_derivative() {
        let layout = LayoutConfig::tied(3, 2, 3).unwrap();
        let (test, model) = instance(33, layout, 2, EnrollAgg::Concat);
        let cfg = ScoringConfig::attentive(layout, NormMode::KeyAndGlobalL2);
        let (_, g) = score_grad(&test, &model, &cfg).unwrap();
        // direction: every test value coordinate scaled along itself
        let mut directional = 0.0;
        for pair in 0..3 {
            for i in layout.value_range(pair) {
                directional += g.d_test[i] * test.vec[i];
            }
        }
        assert!(directional.abs() < 1e-8, "{directional}");
    }

    #[test]
    fn tied_gradient_is_sum_of_query_and_key_paths() {
        let layout = LayoutConfig::tied(3, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_emb(&mut rng, "x", layout.total_dim());
        for norm in NormMode::ALL {
            let cfg = ScoringConfig::attentive(layout, norm);
            let model = build_enrollment(std::slice::from_ref(&x), &layout, EnrollAgg::Concat, "s").unwrap();
            let (_, g) = score_grad(&x, &model, &cfg).unwrap();
            // f(x) = score(x, x): the derivative adds both sides
            let mut y = x.clone();
            let h = 1e-6;
            for i in 0..layout.total_dim() {
                let orig = y.vec[i];
                y.vec[i] = orig + h;
                let mp = build_enrollment(std::slice::from_ref(&y), &layout, EnrollAgg::Concat, "s").unwrap();
                let plus = score_trial(&y, &mp, &cfg).unwrap();
                y.vec[i] = orig - h;
                let mm = build_enrollment(std::slice::from_ref(&y), &layout, EnrollAgg::Concat, "s").unwrap();
                let minus = score_trial(&y, &mm, &cfg).unwrap();
                y.vec[i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let analytic = g.d_test[i] + g.d_enroll[0][i];
                let rel = (fd - analytic).abs() / (fd.abs() + analytic.abs() + 1e-8);
                assert!(rel < 1e-5, "{norm} coord {i}: {analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn compare_reports_non_finite_coordinate() {
        let a = ScoreGradient {
            d_test: vec![1.0, f64::NAN],
            d_enroll: vec![vec![0.5]],
            d_log_alpha: 0.0,
        };
        let b = ScoreGradient {
            d_test: vec![1.0, 2.0],
            d_enroll: vec![vec![0.5]],
            d_log_alpha: 0.0,
        };
        let check = compare_gradients(&a, &b).unwrap();
        assert_eq!(check.non_finite_coord, Some(1));
        assert!(!check.passes(1.0));
    }

    #[test]
    fn fd_rejects_bad_step() {
        let layout = LayoutConfig::tied(1, 1, 1).unwrap();
        let (test, model) = instance(1, layout, 1, EnrollAgg::Concat);
        let cfg = ScoringConfig::attentive(layout, NormMode::None);
        assert!(fd_gradient(&test, &model, &cfg, 0.0).is_err());
    }
}
