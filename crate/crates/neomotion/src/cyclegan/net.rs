//! Generator and discriminator networks with hand-derived backward passes.
//!
//! Everything here is generic over the scalar type so the same wiring can
//! train in f32 and be finite-difference checked in f64. Parameters travel
//! as a flat name -> tensor table; builders in the parent module fix the
//! naming scheme and shapes.

use indexmap::IndexMap;
use ndarray::{Array4, ArrayD, ArrayView1, ArrayView4, Ix1, Ix4};

use crate::nnkernel::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, instance_norm,
    instance_norm_backward, leaky_relu, leaky_relu_backward, reflect_pad2d,
    reflect_pad2d_backward, relu, relu_backward, residual_block, residual_block_backward,
    shape_err, tanh_act, tanh_backward, InCache, KernelError, ResBlock, ResBlockCache, Scalar,
};

use super::{DiscriminatorSpec, GeneratorSpec};

/// Flat parameter table keyed by the builder's naming scheme.
pub type Table<F> = IndexMap<String, ArrayD<F>>;

/// Negative slope shared by every discriminator activation.
pub const LEAKY_SLOPE: f64 = 0.2;

fn c<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("constant representable")
}

fn p4<'t, F: Scalar>(t: &'t Table<F>, name: &str) -> ArrayView4<'t, F> {
    t.get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap_or_else(|_| panic!("parameter {name} is not rank 4"))
}

fn p1<'t, F: Scalar>(t: &'t Table<F>, name: &str) -> ArrayView1<'t, F> {
    t.get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .view()
        .into_dimensionality::<Ix1>()
        .unwrap_or_else(|_| panic!("parameter {name} is not rank 1"))
}

fn add_grad<F: Scalar>(grads: &mut Table<F>, name: String, g: ArrayD<F>) {
    match grads.entry(name) {
        indexmap::map::Entry::Occupied(mut e) => {
            *e.get_mut() += &g;
        }
        indexmap::map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

/// Merge `other` into `into`, summing overlapping entries.
pub fn merge_grads<F: Scalar>(into: &mut Table<F>, other: Table<F>) {
    for (name, g) in other {
        add_grad(into, name, g);
    }
}

/// Activations one conv (or transpose conv) + instance norm + relu stage
/// keeps for its backward pass.
struct Stage<F> {
    x: Array4<F>,
    norm: InCache<F>,
    y: Array4<F>,
}

enum StageKind {
    Conv { stride: usize, padding: usize },
    Transpose { stride: usize, padding: usize },
}

fn stage_forward<F: Scalar>(
    t: &Table<F>,
    prefix: &str,
    x: Array4<F>,
    kind: &StageKind,
) -> Result<Stage<F>, KernelError> {
    let w = p4(t, &format!("{prefix}.w"));
    let b = p1(t, &format!("{prefix}.b"));
    let z = match *kind {
        StageKind::Conv { stride, padding } => conv2d(x.view(), w, Some(b), stride, padding)?,
        StageKind::Transpose { stride, padding } => {
            conv_transpose2d(x.view(), w, Some(b), stride, padding)?
        }
    };
    let (n, norm) = instance_norm(
        z.view(),
        p1(t, &format!("{prefix}.g")),
        p1(t, &format!("{prefix}.e")),
    )?;
    let y = relu(&n);
    Ok(Stage { x, norm, y })
}

fn stage_backward<F: Scalar>(
    t: &Table<F>,
    prefix: &str,
    st: &Stage<F>,
    dy: &Array4<F>,
    kind: &StageKind,
    grads: &mut Table<F>,
) -> Result<Array4<F>, KernelError> {
    let w = p4(t, &format!("{prefix}.w"));
    let dn = relu_backward(&st.y, dy);
    let (dz, dg, de) = instance_norm_backward(&st.norm, p1(t, &format!("{prefix}.g")), dn.view());
    let (dx, dw, db) = match *kind {
        StageKind::Conv { stride, padding } => {
            conv2d_backward(st.x.view(), w, stride, padding, dz.view())?
        }
        StageKind::Transpose { stride, padding } => {
            conv_transpose2d_backward(st.x.view(), w, stride, padding, dz.view())?
        }
    };
    add_grad(grads, format!("{prefix}.w"), dw.into_dyn());
    add_grad(grads, format!("{prefix}.b"), db.into_dyn());
    add_grad(grads, format!("{prefix}.g"), dg.into_dyn());
    add_grad(grads, format!("{prefix}.e"), de.into_dyn());
    Ok(dx)
}

fn res_params<F: Scalar>(t: &Table<F>, prefix: &str) -> ResBlock<F> {
    ResBlock {
        w1: p4(t, &format!("{prefix}.w1")).to_owned(),
        b1: p1(t, &format!("{prefix}.b1")).to_owned(),
        g1: p1(t, &format!("{prefix}.g1")).to_owned(),
        e1: p1(t, &format!("{prefix}.e1")).to_owned(),
        w2: p4(t, &format!("{prefix}.w2")).to_owned(),
        b2: p1(t, &format!("{prefix}.b2")).to_owned(),
        g2: p1(t, &format!("{prefix}.g2")).to_owned(),
        e2: p1(t, &format!("{prefix}.e2")).to_owned(),
    }
}

fn record_res_grads<F: Scalar>(grads: &mut Table<F>, prefix: &str, g: ResBlock<F>) {
    add_grad(grads, format!("{prefix}.w1"), g.w1.into_dyn());
    add_grad(grads, format!("{prefix}.b1"), g.b1.into_dyn());
    add_grad(grads, format!("{prefix}.g1"), g.g1.into_dyn());
    add_grad(grads, format!("{prefix}.e1"), g.e1.into_dyn());
    add_grad(grads, format!("{prefix}.w2"), g.w2.into_dyn());
    add_grad(grads, format!("{prefix}.b2"), g.b2.into_dyn());
    add_grad(grads, format!("{prefix}.g2"), g.g2.into_dyn());
    add_grad(grads, format!("{prefix}.e2"), g.e2.into_dyn());
}

/// Saved activations for one generator forward pass.
pub struct GenCache<F> {
    in_hw: (usize, usize),
    stem: Stage<F>,
    down1: Stage<F>,
    down2: Stage<F>,
    res: Vec<ResBlockCache<F>>,
    up1: Stage<F>,
    up2: Stage<F>,
    head_x: Array4<F>,
    tanh_out: Array4<F>,
}

/// Runs a generator over a (batch, 1, h, w) input. Output is in [0, 1]
/// via tanh rescaled. Requires h and w divisible by 4 so the two stride-2
/// stages invert exactly.
pub fn generator_forward<F: Scalar>(
    t: &Table<F>,
    spec: &GeneratorSpec,
    x: &Array4<F>,
) -> Result<(Array4<F>, GenCache<F>), KernelError> {
    let (_, cin, h, w) = x.dim();
    if cin != 1 {
        return Err(shape_err("generator", format!("expected 1 input channel, got {cin}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(shape_err(
            "generator",
            format!("spatial dims {h}x{w} must be divisible by 4"),
        ));
    }
    let pad0 = reflect_pad2d(x.view(), 3)?;
    let stem = stage_forward(t, "stem", pad0, &StageKind::Conv { stride: 1, padding: 0 })?;
    let down1 =
        stage_forward(t, "down1", stem.y.clone(), &StageKind::Conv { stride: 2, padding: 1 })?;
    let down2 =
        stage_forward(t, "down2", down1.y.clone(), &StageKind::Conv { stride: 2, padding: 1 })?;
    let mut h_act = down2.y.clone();
    let mut res = Vec::with_capacity(spec.n_residual_blocks);
    for i in 0..spec.n_residual_blocks {
        let p = res_params(t, &format!("res{i}"));
        let (y, cache) = residual_block(h_act.view(), &p)?;
        res.push(cache);
        h_act = y;
    }
    let up1 = stage_forward(t, "up1", h_act, &StageKind::Transpose { stride: 2, padding: 1 })?;
    let up2 =
        stage_forward(t, "up2", up1.y.clone(), &StageKind::Transpose { stride: 2, padding: 1 })?;
    let head_x = reflect_pad2d(up2.y.view(), 3)?;
    let z = conv2d(head_x.view(), p4(t, "head.w"), Some(p1(t, "head.b")), 1, 0)?;
    let tanh_out = tanh_act(&z);
    let half = c::<F>(0.5);
    let y = tanh_out.mapv(|v| (v + F::one()) * half);
    Ok((
        y,
        GenCache { in_hw: (h, w), stem, down1, down2, res, up1, up2, head_x, tanh_out },
    ))
}

/// Gradients of [`generator_forward`] for upstream `dy`: returns the input
/// gradient and a parameter-gradient table.
pub fn generator_backward<F: Scalar>(
    t: &Table<F>,
    spec: &GeneratorSpec,
    cache: &GenCache<F>,
    dy: &Array4<F>,
) -> Result<(Array4<F>, Table<F>), KernelError> {
    let mut grads = Table::new();
    let half = c::<F>(0.5);
    let dt = dy.mapv(|v| v * half);
    let dz = tanh_backward(&cache.tanh_out, &dt);
    let (dpad, dwh, dbh) =
        conv2d_backward(cache.head_x.view(), p4(t, "head.w"), 1, 0, dz.view())?;
    add_grad(&mut grads, "head.w".to_string(), dwh.into_dyn());
    add_grad(&mut grads, "head.b".to_string(), dbh.into_dyn());
    let d = reflect_pad2d_backward(dpad.view(), 3, cache.in_hw);
    let kind_t = StageKind::Transpose { stride: 2, padding: 1 };
    let d = stage_backward(t, "up2", &cache.up2, &d, &kind_t, &mut grads)?;
    let mut d = stage_backward(t, "up1", &cache.up1, &d, &kind_t, &mut grads)?;
    for i in (0..spec.n_residual_blocks).rev() {
        let prefix = format!("res{i}");
        let p = res_params(t, &prefix);
        let (dx, g) = residual_block_backward(&cache.res[i], &p, d.view())?;
        record_res_grads(&mut grads, &prefix, g);
        d = dx;
    }
    let kind_c = StageKind::Conv { stride: 2, padding: 1 };
    let d = stage_backward(t, "down2", &cache.down2, &d, &kind_c, &mut grads)?;
    let d = stage_backward(t, "down1", &cache.down1, &d, &kind_c, &mut grads)?;
    let d = stage_backward(
        t,
        "stem",
        &cache.stem,
        &d,
        &StageKind::Conv { stride: 1, padding: 0 },
        &mut grads,
    )?;
    let dx = reflect_pad2d_backward(d.view(), 3, cache.in_hw);
    Ok((dx, grads))
}

/// Activations one discriminator stage (conv + optional instance norm +
/// leaky relu) keeps for backward.
struct DisStage<F> {
    x: Array4<F>,
    norm: Option<InCache<F>>,
    y: Array4<F>,
}

/// Saved activations for one discriminator forward pass.
pub struct DisCache<F> {
    stages: Vec<DisStage<F>>,
    head_x: Array4<F>,
}

/// Runs a patch discriminator over a (batch, 1, h, w) input; output is a
/// score grid roughly h/16 x w/16. The stride-2 core plus the 5x5 head give
/// each score a 110-pixel nominal receptive field, so a central score of a
/// 70x70 input sees the entire image.
pub fn discriminator_forward<F: Scalar>(
    t: &Table<F>,
    _spec: &DiscriminatorSpec,
    x: &Array4<F>,
) -> Result<(Array4<F>, DisCache<F>), KernelError> {
    let mut h = x.clone();
    let mut stages = Vec::with_capacity(4);
    for (i, normed) in [false, true, true, true].into_iter().enumerate() {
        let prefix = format!("l{}", i + 1);
        let z = conv2d(
            h.view(),
            p4(t, &format!("{prefix}.w")),
            Some(p1(t, &format!("{prefix}.b"))),
            2,
            1,
        )?;
        let (pre, norm) = if normed {
            let (n, cache) = instance_norm(
                z.view(),
                p1(t, &format!("{prefix}.g")),
                p1(t, &format!("{prefix}.e")),
            )?;
            (n, Some(cache))
        } else {
            (z, None)
        };
        let y = leaky_relu(&pre, LEAKY_SLOPE);
        stages.push(DisStage { x: h, norm, y: y.clone() });
        h = y;
    }
    let scores = conv2d(h.view(), p4(t, "head.w"), Some(p1(t, "head.b")), 1, 2)?;
    Ok((scores, DisCache { stages, head_x: h }))
}

/// Gradients of [`discriminator_forward`]: input gradient plus parameter
/// gradients.
pub fn discriminator_backward<F: Scalar>(
    t: &Table<F>,
    cache: &DisCache<F>,
    dscores: &Array4<F>,
) -> Result<(Array4<F>, Table<F>), KernelError> {
    let mut grads = Table::new();
    let (mut d, dwh, dbh) =
        conv2d_backward(cache.head_x.view(), p4(t, "head.w"), 1, 2, dscores.view())?;
    add_grad(&mut grads, "head.w".to_string(), dwh.into_dyn());
    add_grad(&mut grads, "head.b".to_string(), dbh.into_dyn());
    for (i, st) in cache.stages.iter().enumerate().rev() {
        let prefix = format!("l{}", i + 1);
        let dpre = leaky_relu_backward(&st.y, &d, LEAKY_SLOPE);
        let dz = match &st.norm {
            Some(norm) => {
                let (dz, dg, de) =
                    instance_norm_backward(norm, p1(t, &format!("{prefix}.g")), dpre.view());
                add_grad(&mut grads, format!("{prefix}.g"), dg.into_dyn());
                add_grad(&mut grads, format!("{prefix}.e"), de.into_dyn());
                dz
            }
            None => dpre,
        };
        let (dx, dw, db) =
            conv2d_backward(st.x.view(), p4(t, &format!("{prefix}.w")), 2, 1, dz.view())?;
        add_grad(&mut grads, format!("{prefix}.w"), dw.into_dyn());
        add_grad(&mut grads, format!("{prefix}.b"), db.into_dyn());
        d = dx;
    }
    Ok((d, grads))
}

/// Which side of the real/fake decision a score grid is penalized toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvTarget {
    Real,
    Fake,
}

/// Least-squares adversarial loss: mean of (score - target)^2 with target 1
/// for real and 0 for fake. Returns the loss and its gradient w.r.t. scores.
pub fn adversarial_loss<F: Scalar>(scores: &Array4<F>, target: AdvTarget) -> (F, Array4<F>) {
    let tval = match target {
        AdvTarget::Real => F::one(),
        AdvTarget::Fake => F::zero(),
    };
    let n = c::<F>(scores.len() as f64);
    let mut loss = F::zero();
    let two = c::<F>(2.0);
    let grad = scores.mapv(|s| {
        let d = s - tval;
        loss = loss + d * d;
        two * d / n
    });
    (loss / n, grad)
}

/// Mean absolute error between a reconstruction and its original. Returns
/// the loss and its gradient w.r.t. the reconstruction.
pub fn cycle_loss<F: Scalar>(original: &Array4<F>, reconstructed: &Array4<F>) -> (F, Array4<F>) {
    assert_eq!(original.dim(), reconstructed.dim(), "cycle_loss dims");
    let n = c::<F>(original.len() as f64);
    let mut loss = F::zero();
    let mut grad = Array4::zeros(original.dim());
    ndarray::Zip::from(&mut grad)
        .and(original)
        .and(reconstructed)
        .for_each(|g, &o, &r| {
            let d = r - o;
            loss = loss + d.abs();
            *g = if d > F::zero() {
                F::one() / n
            } else if d < F::zero() {
                -F::one() / n
            } else {
                F::zero()
            };
        });
    (loss / n, grad)
}

/// Everything one generator update produces: the four loss components (cycle
/// terms already weighted by lambda), the generated batches for the replay
/// buffers, and the gradients for both generators.
pub struct GenStep<F: Scalar> {
    pub adv_mc: F,
    pub adv_mg: F,
    pub cyc_mc: F,
    pub cyc_mg: F,
    pub fake_clean: Array4<F>,
    pub fake_motion: Array4<F>,
    pub mc_grads: Table<F>,
    pub mg_grads: Table<F>,
}

/// Forward and backward for one joint generator update. The total loss whose
/// gradients are returned is adv_mc + adv_mg + cyc_mc + cyc_mg where
///   adv_mc = LS(Dis_MC(MC(motion)), real)
///   adv_mg = LS(Dis_MG(MG(clean)), real)
///   cyc_mc = lambda * L1(motion, MG(MC(motion)))
///   cyc_mg = lambda * L1(clean, MC(MG(clean)))
/// Discriminator parameters are treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn generator_step<F: Scalar>(
    mc: &Table<F>,
    mg: &Table<F>,
    dis_mc: &Table<F>,
    dis_mg: &Table<F>,
    gspec: &GeneratorSpec,
    dspec: &DiscriminatorSpec,
    batch_clean: &Array4<F>,
    batch_motion: &Array4<F>,
    lambda: F,
) -> Result<GenStep<F>, KernelError> {
    let (fake_clean, c_fake_clean) = generator_forward(mc, gspec, batch_motion)?;
    let (fake_motion, c_fake_motion) = generator_forward(mg, gspec, batch_clean)?;
    let (rec_motion, c_rec_motion) = generator_forward(mg, gspec, &fake_clean)?;
    let (rec_clean, c_rec_clean) = generator_forward(mc, gspec, &fake_motion)?;
    let (s_fc, dc_fc) = discriminator_forward(dis_mc, dspec, &fake_clean)?;
    let (s_fm, dc_fm) = discriminator_forward(dis_mg, dspec, &fake_motion)?;

    let (adv_mc, ds_fc) = adversarial_loss(&s_fc, AdvTarget::Real);
    let (adv_mg, ds_fm) = adversarial_loss(&s_fm, AdvTarget::Real);
    let (raw_cyc_mc, mut d_rec_motion) = cycle_loss(batch_motion, &rec_motion);
    let (raw_cyc_mg, mut d_rec_clean) = cycle_loss(batch_clean, &rec_clean);
    d_rec_motion.mapv_inplace(|v| v * lambda);
    d_rec_clean.mapv_inplace(|v| v * lambda);

    // Path into fake_clean: through Dis_MC (adversarial) and through the
    // reconstruction of motion (cycle).
    let (d_fake_clean_adv, _) = discriminator_backward(dis_mc, &dc_fc, &ds_fc)?;
    let (d_fake_clean_cyc, mg_from_rec) =
        generator_backward(mg, gspec, &c_rec_motion, &d_rec_motion)?;
    let d_fake_clean = d_fake_clean_adv + &d_fake_clean_cyc;
    let (_, mc_from_fake) = generator_backward(mc, gspec, &c_fake_clean, &d_fake_clean)?;

    let (d_fake_motion_adv, _) = discriminator_backward(dis_mg, &dc_fm, &ds_fm)?;
    let (d_fake_motion_cyc, mc_from_rec) =
        generator_backward(mc, gspec, &c_rec_clean, &d_rec_clean)?;
    let d_fake_motion = d_fake_motion_adv + &d_fake_motion_cyc;
    let (_, mg_from_fake) = generator_backward(mg, gspec, &c_fake_motion, &d_fake_motion)?;

    let mut mc_grads = mc_from_fake;
    merge_grads(&mut mc_grads, mc_from_rec);
    let mut mg_grads = mg_from_fake;
    merge_grads(&mut mg_grads, mg_from_rec);

    Ok(GenStep {
        adv_mc,
        adv_mg,
        cyc_mc: raw_cyc_mc * lambda,
        cyc_mg: raw_cyc_mg * lambda,
        fake_clean,
        fake_motion,
        mc_grads,
        mg_grads,
    })
}

/// Forward and backward for one discriminator update: loss is
/// LS(D(real), real) + LS(D(fake), fake) with the fake batch detached.
pub fn discriminator_step<F: Scalar>(
    dis: &Table<F>,
    dspec: &DiscriminatorSpec,
    real: &Array4<F>,
    fake: &Array4<F>,
) -> Result<(F, Table<F>), KernelError> {
    let (s_real, c_real) = discriminator_forward(dis, dspec, real)?;
    let (loss_real, ds_real) = adversarial_loss(&s_real, AdvTarget::Real);
    let (s_fake, c_fake) = discriminator_forward(dis, dspec, fake)?;
    let (loss_fake, ds_fake) = adversarial_loss(&s_fake, AdvTarget::Fake);
    let (_, mut grads) = discriminator_backward(dis, &c_real, &ds_real)?;
    let (_, fake_grads) = discriminator_backward(dis, &c_fake, &ds_fake)?;
    merge_grads(&mut grads, fake_grads);
    Ok((loss_real + loss_fake, grads))
}
