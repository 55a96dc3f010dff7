//! Analytic gradients for the reference model, and the finite-difference
//! check that pins them down. Gradients are returned in a model-shaped
//! container so the flattening order is shared with the weights themselves.

use super::{
    gelu_prime, matmul_nt, matmul_tn, LnTrace, Model, ModelConfig, ModelError, PositionalFamily,
    Scalar, Trace,
};
use crate::convo::TokenId;
use crate::mask::BoolMask;
use ndarray::{Array1, Array2};

/// All parameters in one canonical order: embedding, then per layer
/// (ln1 gain, ln1 shift, wq, wk, wv, wo, ln2 gain, ln2 shift, w1, w2),
/// then final norm gain/shift and the output projection.
pub(crate) fn flatten<F: Scalar>(m: &Model<F>) -> Vec<F> {
    let mut out = Vec::new();
    let push1 = |out: &mut Vec<F>, a: &Array1<F>| out.extend(a.iter().copied());
    let push2 = |out: &mut Vec<F>, a: &Array2<F>| out.extend(a.iter().copied());
    push2(&mut out, &m.embed);
    for l in &m.layers {
        push1(&mut out, &l.ln1_g);
        push1(&mut out, &l.ln1_b);
        push2(&mut out, &l.wq);
        push2(&mut out, &l.wk);
        push2(&mut out, &l.wv);
        push2(&mut out, &l.wo);
        push1(&mut out, &l.ln2_g);
        push1(&mut out, &l.ln2_b);
        push2(&mut out, &l.w1);
        push2(&mut out, &l.w2);
    }
    push1(&mut out, &m.lnf_g);
    push1(&mut out, &m.lnf_b);
    push2(&mut out, &m.w_out);
    out
}

pub(crate) fn assign_flat<F: Scalar>(m: &mut Model<F>, flat: &[F]) {
    let mut it = flat.iter().copied();
    let take1 = |a: &mut Array1<F>, it: &mut dyn Iterator<Item = F>| {
        for v in a.iter_mut() {
            *v = it.next().expect("flat vector long enough");
        }
    };
    fn take2<F: Scalar>(a: &mut Array2<F>, it: &mut dyn Iterator<Item = F>) {
        for v in a.iter_mut() {
            *v = it.next().expect("flat vector long enough");
        }
    }
    take2(&mut m.embed, &mut it);
    for l in &mut m.layers {
        take1(&mut l.ln1_g, &mut it);
        take1(&mut l.ln1_b, &mut it);
        take2(&mut l.wq, &mut it);
        take2(&mut l.wk, &mut it);
        take2(&mut l.wv, &mut it);
        take2(&mut l.wo, &mut it);
        take1(&mut l.ln2_g, &mut it);
        take1(&mut l.ln2_b, &mut it);
        take2(&mut l.w1, &mut it);
        take2(&mut l.w2, &mut it);
    }
    take1(&mut m.lnf_g, &mut it);
    take1(&mut m.lnf_b, &mut it);
    take2(&mut m.w_out, &mut it);
    assert!(it.next().is_none(), "flat vector too long");
}

/// Model-shaped container with every array zeroed.
fn grad_shell<F: Scalar>(m: &Model<F>) -> Model<F> {
    let mut g = m.clone();
    g.embed.mapv_inplace(|_| F::zero());
    for l in &mut g.layers {
        l.ln1_g.mapv_inplace(|_| F::zero());
        l.ln1_b.mapv_inplace(|_| F::zero());
        l.wq.mapv_inplace(|_| F::zero());
        l.wk.mapv_inplace(|_| F::zero());
        l.wv.mapv_inplace(|_| F::zero());
        l.wo.mapv_inplace(|_| F::zero());
        l.ln2_g.mapv_inplace(|_| F::zero());
        l.ln2_b.mapv_inplace(|_| F::zero());
        l.w1.mapv_inplace(|_| F::zero());
        l.w2.mapv_inplace(|_| F::zero());
    }
    g.lnf_g.mapv_inplace(|_| F::zero());
    g.lnf_b.mapv_inplace(|_| F::zero());
    g.w_out.mapv_inplace(|_| F::zero());
    g
}

/// Backward through layer norm. Returns the input gradient and accumulates
/// gain/shift gradients.
fn ln_backward<F: Scalar>(
    dy: &Array2<F>,
    ln: &LnTrace<F>,
    g: &Array1<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let dn = F::from_f64(d as f64);
    let mut dx = Array2::default((n, d));
    for p in 0..n {
        for c in 0..d {
            dg[c] = dg[c] + dy[[p, c]] * ln.xhat[[p, c]];
            db[c] = db[c] + dy[[p, c]];
        }
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for c in 0..d {
            let dxh = dy[[p, c]] * g[c];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * ln.xhat[[p, c]];
        }
        mean_dxhat = mean_dxhat / dn;
        mean_dxhat_xhat = mean_dxhat_xhat / dn;
        for c in 0..d {
            let dxh = dy[[p, c]] * g[c];
            dx[[p, c]] =
                ln.inv_sig[p] * (dxh - mean_dxhat - ln.xhat[[p, c]] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Gradient of the total NLL with respect to every parameter.
pub(crate) fn backward<F: Scalar>(
    model: &Model<F>,
    trace: &Trace<F>,
    tokens: &[TokenId],
    position_ids: &[u32],
    mask: &BoolMask,
    targets: &[Option<TokenId>],
    include: &[bool],
) -> Result<Model<F>, ModelError> {
    let cfg = &model.cfg;
    let (len, vocab) = trace.logits.dim();
    let d = cfg.d_model;
    let mut grads = grad_shell(model);

    // d total / d logits: softmax minus one-hot at included positions
    let mut dlogits = Array2::default((len, vocab));
    for p in 0..len {
        if !include[p] {
            continue;
        }
        let target = targets[p].ok_or(ModelError::MissingTarget { pos: p })?;
        let mut max = trace.logits[[p, 0]];
        for c in 1..vocab {
            if trace.logits[[p, c]] > max {
                max = trace.logits[[p, c]];
            }
        }
        let mut denom = F::zero();
        for c in 0..vocab {
            denom = denom + (trace.logits[[p, c]] - max).exp();
        }
        for c in 0..vocab {
            dlogits[[p, c]] = (trace.logits[[p, c]] - max).exp() / denom;
        }
        dlogits[[p, target.0 as usize]] = dlogits[[p, target.0 as usize]] - F::one();
    }

    grads.w_out = matmul_tn(&trace.lnf.y, &dlogits);
    let dy = matmul_nt(&dlogits, &model.w_out);
    let mut dx = ln_backward(&dy, &trace.lnf, &model.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

    let dh = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    for (li, lt) in trace.layers.iter().enumerate().rev() {
        let lw = &model.layers[li];
        let gw = &mut grads.layers[li];
        assert!(
            !lt.attn.is_empty(),
            "backward needs a trace captured with keep=true"
        );

        // feed-forward half: x_out = x_mid + gelu(ln2(x_mid) w1) w2
        let dact = matmul_nt(&dx, &lw.w2);
        gw.w2 = matmul_tn(&lt.act, &dx);
        let mut dpre = dact;
        for p in 0..len {
            for c in 0..cfg.d_ff {
                dpre[[p, c]] = dpre[[p, c]] * gelu_prime(lt.pre[[p, c]]);
            }
        }
        gw.w1 = matmul_tn(&lt.ln2.y, &dpre);
        let db2 = matmul_nt(&dpre, &lw.w1);
        let dterm = ln_backward(&db2, &lt.ln2, &lw.ln2_g, &mut gw.ln2_g, &mut gw.ln2_b);
        let mut dx_mid = dx;
        for p in 0..len {
            for c in 0..d {
                dx_mid[[p, c]] = dx_mid[[p, c]] + dterm[[p, c]];
            }
        }

        // attention half: x_mid = x_in + (attn concat) wo
        gw.wo = matmul_tn(&lt.ocat, &dx_mid);
        let docat = matmul_nt(&dx_mid, &lw.wo);
        let mut dqr = Array2::default((len, d));
        let mut dkr = Array2::default((len, d));
        let mut dv = Array2::default((len, d));
        for h in 0..cfg.n_heads {
            let c0 = h * dh;
            let attn = &lt.attn[h];
            for p in 0..len {
                // dW over visible keys, then softmax-row backward to dS
                let mut dw = vec![F::zero(); len];
                let mut inner = F::zero();
                for k in 0..len {
                    if !mask.allowed(p, k) {
                        continue;
                    }
                    let mut acc = F::zero();
                    for c in 0..dh {
                        acc = acc + docat[[p, c0 + c]] * lt.v[[k, c0 + c]];
                        dv[[k, c0 + c]] =
                            dv[[k, c0 + c]] + attn[[p, k]] * docat[[p, c0 + c]];
                    }
                    dw[k] = acc;
                    inner = inner + attn[[p, k]] * acc;
                }
                for k in 0..len {
                    if !mask.allowed(p, k) {
                        continue;
                    }
                    let ds = attn[[p, k]] * (dw[k] - inner) * scale;
                    for c in 0..dh {
                        dqr[[p, c0 + c]] = dqr[[p, c0 + c]] + ds * lt.kr[[k, c0 + c]];
                        dkr[[k, c0 + c]] = dkr[[k, c0 + c]] + ds * lt.qr[[p, c0 + c]];
                    }
                }
            }
        }
        let (dq, dk) = match cfg.positional {
            PositionalFamily::Rotary => (
                rotate_heads_transpose(&dqr, position_ids, cfg.n_heads, cfg.rotary_base),
                rotate_heads_transpose(&dkr, position_ids, cfg.n_heads, cfg.rotary_base),
            ),
            PositionalFamily::Sinusoidal => (dqr, dkr),
        };
        gw.wq = matmul_tn(&lt.ln1.y, &dq);
        gw.wk = matmul_tn(&lt.ln1.y, &dk);
        gw.wv = matmul_tn(&lt.ln1.y, &dv);
        let mut da = matmul_nt(&dq, &lw.wq);
        let dak = matmul_nt(&dk, &lw.wk);
        let dav = matmul_nt(&dv, &lw.wv);
        for p in 0..len {
            for c in 0..d {
                da[[p, c]] = da[[p, c]] + dak[[p, c]] + dav[[p, c]];
            }
        }
        let dterm = ln_backward(&da, &lt.ln1, &lw.ln1_g, &mut gw.ln1_g, &mut gw.ln1_b);
        let mut dx_in = dx_mid;
        for p in 0..len {
            for c in 0..d {
                dx_in[[p, c]] = dx_in[[p, c]] + dterm[[p, c]];
            }
        }
        dx = dx_in;
    }

    for (p, tok) in tokens.iter().enumerate() {
        for c in 0..d {
            grads.embed[[tok.0 as usize, c]] = grads.embed[[tok.0 as usize, c]] + dx[[p, c]];
        }
    }
    Ok(grads)
}

/// Inverse rotation (the rotation's transpose), for the rotary backward.
fn rotate_heads_transpose<F: Scalar>(
    dy: &Array2<F>,
    position_ids: &[u32],
    n_heads: usize,
    base: f64,
) -> Array2<F> {
    let (len, d) = dy.dim();
    let dh = d / n_heads;
    let half = dh / 2;
    let mut out = dy.clone();
    for p in 0..len {
        for h in 0..n_heads {
            let c0 = h * dh;
            for j in 0..half {
                let theta = base.powf(-(2.0 * j as f64) / dh as f64);
                let ang = position_ids[p] as f64 * theta;
                let (sin, cos) = (F::from_f64(ang.sin()), F::from_f64(ang.cos()));
                let dy1 = dy[[p, c0 + j]];
                let dy2 = dy[[p, c0 + j + half]];
                out[[p, c0 + j]] = dy1 * cos + dy2 * sin;
                out[[p, c0 + j + half]] = dy2 * cos - dy1 * sin;
            }
        }
    }
    out
}

/// Compare the analytic gradient of the total NLL against central finite
/// differences for every parameter; returns the worst relative error
/// (difference over `max(|analytic| + |numeric|, 1e-5)`). Runs in f64
/// regardless of the config's precision field.
pub fn grad_check(
    cfg: &ModelConfig,
    tokens: &[TokenId],
    position_ids: &[u32],
    mask: &BoolMask,
    targets: &[Option<TokenId>],
    include: &[bool],
    epsilon: f64,
) -> Result<f64, ModelError> {
    let mut model: Model<f64> = super::init_model(cfg)?;
    let trace = model.forward_trace(tokens, position_ids, mask, true)?;
    let analytic = flatten(&backward(
        &model,
        &trace,
        tokens,
        position_ids,
        mask,
        targets,
        include,
    )?);
    let base = flatten(&model);

    let loss_at = |m: &mut Model<f64>, flat: &[f64]| -> Result<f64, ModelError> {
        assign_flat(m, flat);
        let out = m.forward(tokens, position_ids, mask)?;
        Ok(super::nll(&out, targets, include)?.total)
    };

    let mut worst = 0.0f64;
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + epsilon;
        let plus = loss_at(&mut model, &work)?;
        work[i] = base[i] - epsilon;
        let minus = loss_at(&mut model, &work)?;
        work[i] = base[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        // central differences cannot resolve components much below
        // |loss| * ulp / epsilon (~1e-10 here), so values that small are
        // measured against an absolute scale instead of their own magnitude
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-5);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    assign_flat(&mut model, &base);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BoolMask;

    fn toy_input(len: usize) -> (Vec<TokenId>, Vec<u32>, BoolMask, Vec<Option<TokenId>>, Vec<bool>) {
        let tokens: Vec<TokenId> = (0..len as u32).map(|t| TokenId(t % 7)).collect();
        let positions: Vec<u32> = (0..len as u32).collect();
        let mask = BoolMask::causal(len);
        let targets: Vec<Option<TokenId>> =
            (1..=len as u32).map(|t| Some(TokenId(t % 7))).collect();
        let mut include = vec![true; len];
        include[len - 1] = false;
        (tokens, positions, mask, targets, include)
    }

    #[test]
    fn flatten_assign_round_trips() {
        let cfg = ModelConfig::new(7, 8, 2, 2).with_seed(3);
        let m: Model<f64> = super::super::init_model(&cfg).unwrap();
        let flat = flatten(&m);
        let expected = 7 * 8
            + 2 * (8 + 8 + 4 * 64 + 8 + 8 + 8 * 32 + 32 * 8)
            + 8
            + 8
            + 8 * 7;
        assert_eq!(flat.len(), expected);
        let mut m2 = m.clone();
        assign_flat(&mut m2, &flat);
        assert_eq!(flatten(&m2), flat);
    }

    #[test]
    fn analytic_matches_finite_differences_rotary() {
        let cfg = ModelConfig::new(7, 8, 1, 2).with_seed(9);
        let (tokens, pos, mask, targets, include) = toy_input(6);
        let err = grad_check(&cfg, &tokens, &pos, &mask, &targets, &include, 1e-5).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn analytic_matches_finite_differences_sinusoidal() {
        let cfg = ModelConfig::new(7, 8, 1, 2)
            .with_seed(9)
            .with_positional(PositionalFamily::Sinusoidal);
        let (tokens, pos, mask, targets, include) = toy_input(6);
        let err = grad_check(&cfg, &tokens, &pos, &mask, &targets, &include, 1e-5).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn two_layer_gradients_also_check_out() {
        let cfg = ModelConfig::new(7, 4, 2, 2).with_seed(1).with_d_ff(8);
        let (tokens, pos, mask, targets, include) = toy_input(5);
        let err = grad_check(&cfg, &tokens, &pos, &mask, &targets, &include, 1e-5).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn no_included_positions_means_zero_gradients() {
        let cfg = ModelConfig::new(7, 8, 1, 2).with_seed(9);
        let model: Model<f64> = super::super::init_model(&cfg).unwrap();
        let (tokens, pos, mask, targets, _) = toy_input(4);
        let include = vec![false; 4];
        let trace = model.forward_trace(&tokens, &pos, &mask, true).unwrap();
        let grads = backward(&model, &trace, &tokens, &pos, &mask, &targets, &include).unwrap();
        assert!(flatten(&grads).iter().all(|g| *g == 0.0));
    }
}
