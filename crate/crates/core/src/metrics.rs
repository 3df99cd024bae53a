//! SSIM and GMS similarity maps, the inpainting loss, and ROC AUC.

use intra_tensor::{Graph, Real, Tensor, Var};

use crate::error::{IntraError, Result};
use crate::image::{gaussian_kernel, reflect_index, Image, Plane};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const GMS_C: f64 = 0.0026;
/// Added under the square root of the differentiable gradient magnitude.
pub const GMS_SQRT_EPS: f64 = 1e-12;

const PREWITT_SMOOTH: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
const PREWITT_DIFF: [f64; 3] = [1.0 / 3.0, 0.0, -1.0 / 3.0];

/// Scaling of the GMS and SSIM terms of the inpainting loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.01, beta: 0.01 }
    }
}

fn check_pair(op: &str, a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(IntraError::invalid(format!(
            "{op}: shape mismatch {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )))
    }
}

fn channel_mean(maps: Vec<Vec<f64>>, height: usize, width: usize) -> Plane {
    let c = maps.len() as f64;
    let data = (0..height * width)
        .map(|i| (maps.iter().map(|m| m[i]).sum::<f64>() / c) as f32)
        .collect();
    Plane::new(height, width, data).expect("map shape")
}

fn filtered(plane: &Plane, k: &[f64]) -> Vec<f64> {
    plane.filter_separable(k, k).data().iter().map(|&v| v as f64).collect()
}

/// Per-pixel SSIM, averaged over channels.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Plane> {
    check_pair("ssim_map", a, b)?;
    let (h, w) = (a.height(), a.width());
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let maps = (0..a.channels())
        .map(|c| {
            let (pa, pb) = (a.channel(c), b.channel(c));
            let mu_a = filtered(&pa, &k);
            let mu_b = filtered(&pb, &k);
            let aa = filtered(&Plane::from_fn(h, w, |y, x| pa.get(y, x) * pa.get(y, x)), &k);
            let bb = filtered(&Plane::from_fn(h, w, |y, x| pb.get(y, x) * pb.get(y, x)), &k);
            let ab = filtered(&Plane::from_fn(h, w, |y, x| pa.get(y, x) * pb.get(y, x)), &k);
            (0..h * w)
                .map(|i| {
                    let (ma, mb) = (mu_a[i], mu_b[i]);
                    let va = aa[i] - ma * ma;
                    let vb = bb[i] - mb * mb;
                    let cov = ab[i] - ma * mb;
                    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
                })
                .collect()
        })
        .collect();
    Ok(channel_mean(maps, h, w))
}

/// Prewitt gradient magnitude of one plane.
pub fn gradient_magnitude(p: &Plane) -> Vec<f64> {
    let gx = p.filter_separable(&PREWITT_SMOOTH, &PREWITT_DIFF);
    let gy = p.filter_separable(&PREWITT_DIFF, &PREWITT_SMOOTH);
    gx.data()
        .iter()
        .zip(gy.data())
        .map(|(&x, &y)| ((x as f64).powi(2) + (y as f64).powi(2)).sqrt())
        .collect()
}

/// Per-pixel gradient magnitude similarity, averaged over channels.
pub fn gms_map(a: &Image, b: &Image) -> Result<Plane> {
    check_pair("gms_map", a, b)?;
    let maps = (0..a.channels())
        .map(|c| {
            let ma = gradient_magnitude(&a.channel(c));
            let mb = gradient_magnitude(&b.channel(c));
            ma.iter()
                .zip(&mb)
                .map(|(&x, &y)| (2.0 * x * y + GMS_C) / (x * x + y * y + GMS_C))
                .collect()
        })
        .collect();
    Ok(channel_mean(maps, a.height(), a.width()))
}

/// Inpainting loss of one patch pair, evaluated directly on images.
pub fn inpaint_loss(original: &Image, reconstruction: &Image, weights: LossWeights) -> Result<f64> {
    check_pair("inpaint_loss", original, reconstruction)?;
    let n = original.data().len() as f64;
    let l2 = original
        .data()
        .iter()
        .zip(reconstruction.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / n;
    let pixels = (original.height() * original.width()) as f64;
    let gms = gms_map(original, reconstruction)?;
    let ssim = ssim_map(original, reconstruction)?;
    let gms_term = gms.data().iter().map(|&v| 1.0 - v as f64).sum::<f64>() / pixels;
    let ssim_term = ssim.data().iter().map(|&v| (1.0 - v as f64).max(0.0)).sum::<f64>() / pixels;
    Ok(l2 + weights.alpha * gms_term + weights.beta * ssim_term)
}

/// `K^2 x K^2` matrix `F` with `F[o][i]` the weight of input pixel `i` in
/// output pixel `o` for a separable correlation with reflection padding.
fn filter_matrix(side: usize, ky: &[f64], kx: &[f64]) -> Vec<f64> {
    let n = side * side;
    let (ry, rx) = ((ky.len() / 2) as isize, (kx.len() / 2) as isize);
    let mut f = vec![0.0; n * n];
    for y in 0..side {
        for x in 0..side {
            let o = y * side + x;
            for (dy, &wy) in ky.iter().enumerate() {
                let sy = reflect_index(y as isize + dy as isize - ry, side);
                for (dx, &wx) in kx.iter().enumerate() {
                    let sx = reflect_index(x as isize + dx as isize - rx, side);
                    f[o * n + sy * side + sx] += wy * wx;
                }
            }
        }
    }
    f
}

/// Constant filter matrices for the differentiable patch loss, stored
/// transposed so that filtering a row batch is `rows @ F^T`.
#[derive(Debug, Clone)]
pub struct LossFilters<T: Real> {
    side: usize,
    channels: usize,
    gauss_t: Tensor<T>,
    prewitt_x_t: Tensor<T>,
    prewitt_y_t: Tensor<T>,
}

impl<T: Real> LossFilters<T> {
    pub fn new(side: usize, channels: usize) -> Self {
        let n = side * side;
        let transposed = |f: Vec<f64>| Tensor::from_fn([n, n], |idx| T::lit(f[(idx % n) * n + idx / n]));
        let g = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
        LossFilters {
            side,
            channels,
            gauss_t: transposed(filter_matrix(side, &g, &g)),
            prewitt_x_t: transposed(filter_matrix(side, &PREWITT_SMOOTH, &PREWITT_DIFF)),
            prewitt_y_t: transposed(filter_matrix(side, &PREWITT_DIFF, &PREWITT_SMOOTH)),
        }
    }

    pub fn patch_side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Differentiable inpainting loss averaged over a batch.
///
/// `reconstruction` and `target` are `[B, K*K*C]` with channel-last patches.
pub fn inpaint_loss_graph<'a, T: Real>(
    g: &mut Graph<'a, T>,
    reconstruction: Var,
    target: Var,
    filters: &'a LossFilters<T>,
    weights: LossWeights,
) -> Result<Var> {
    let shape = g.shape(reconstruction).to_vec();
    let (k, c) = (filters.side, filters.channels);
    let pixels = k * k;
    if shape.len() != 2 || shape[1] != pixels * c || g.shape(target) != shape.as_slice() {
        return Err(IntraError::invalid(format!(
            "inpaint_loss: expected matching [B, {}] inputs, got {:?} and {:?}",
            pixels * c,
            shape,
            g.shape(target)
        )));
    }
    let b = shape[0];

    let diff = g.sub(reconstruction, target)?;
    let sq = g.square(diff)?;
    let l2 = g.mean(sq)?;

    // [B, K*K*C] -> [B*C, K*K]
    let mut planes = |x: Var| -> Result<Var> {
        let x = g.reshape(x, &[b, pixels, c])?;
        let x = g.permute(x, &[0, 2, 1])?;
        Ok(g.reshape(x, &[b * c, pixels])?)
    };
    let xr = planes(reconstruction)?;
    let xt = planes(target)?;

    let gauss = g.constant_ref(&filters.gauss_t);
    let px = g.constant_ref(&filters.prewitt_x_t);
    let py = g.constant_ref(&filters.prewitt_y_t);

    let channel_avg = |g: &mut Graph<'a, T>, m: Var| -> Result<Var> {
        let m = g.reshape(m, &[b, c, pixels])?;
        Ok(g.mean_axis(m, 1)?)
    };

    // gradient magnitude similarity
    let magnitude = |g: &mut Graph<'a, T>, x: Var| -> Result<Var> {
        let gx = g.matmul(x, px)?;
        let gy = g.matmul(x, py)?;
        let gx2 = g.square(gx)?;
        let gy2 = g.square(gy)?;
        let s = g.add(gx2, gy2)?;
        let s = g.add_scalar(s, GMS_SQRT_EPS)?;
        Ok(g.sqrt(s)?)
    };
    let mr = magnitude(g, xr)?;
    let mt = magnitude(g, xt)?;
    let prod = g.mul(mr, mt)?;
    let num = g.mul_scalar(prod, 2.0)?;
    let num = g.add_scalar(num, GMS_C)?;
    let mr2 = g.square(mr)?;
    let mt2 = g.square(mt)?;
    let den = g.add(mr2, mt2)?;
    let den = g.add_scalar(den, GMS_C)?;
    let gms = g.div(num, den)?;
    let gms = channel_avg(g, gms)?;
    let gms_loss = g.mul_scalar(gms, -1.0)?;
    let gms_loss = g.add_scalar(gms_loss, 1.0)?;
    let gms_term = g.mean(gms_loss)?;

    // structural similarity
    let mu_r = g.matmul(xr, gauss)?;
    let mu_t = g.matmul(xt, gauss)?;
    let rr = g.square(xr)?;
    let tt = g.square(xt)?;
    let rt = g.mul(xr, xt)?;
    let e_rr = g.matmul(rr, gauss)?;
    let e_tt = g.matmul(tt, gauss)?;
    let e_rt = g.matmul(rt, gauss)?;
    let mu_r2 = g.square(mu_r)?;
    let mu_t2 = g.square(mu_t)?;
    let mu_rt = g.mul(mu_r, mu_t)?;
    let var_r = g.sub(e_rr, mu_r2)?;
    let var_t = g.sub(e_tt, mu_t2)?;
    let cov = g.sub(e_rt, mu_rt)?;
    let lum_num = g.mul_scalar(mu_rt, 2.0)?;
    let lum_num = g.add_scalar(lum_num, SSIM_C1)?;
    let cs_num = g.mul_scalar(cov, 2.0)?;
    let cs_num = g.add_scalar(cs_num, SSIM_C2)?;
    let lum_den = g.add(mu_r2, mu_t2)?;
    let lum_den = g.add_scalar(lum_den, SSIM_C1)?;
    let cs_den = g.add(var_r, var_t)?;
    let cs_den = g.add_scalar(cs_den, SSIM_C2)?;
    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    let ssim = g.div(num, den)?;
    let ssim = channel_avg(g, ssim)?;
    let ssim_loss = g.mul_scalar(ssim, -1.0)?;
    let ssim_loss = g.add_scalar(ssim_loss, 1.0)?;
    let ssim_loss = g.relu(ssim_loss)?;
    let ssim_term = g.mean(ssim_loss)?;

    let gms_term = g.mul_scalar(gms_term, weights.alpha)?;
    let ssim_term = g.mul_scalar(ssim_term, weights.beta)?;
    let total = g.add(l2, gms_term)?;
    Ok(g.add(total, ssim_term)?)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; ties get
/// half credit.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(IntraError::invalid(format!(
            "roc_auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(IntraError::invalid("roc_auc: NaN score"));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(IntraError::invalid(
            "roc_auc: labels contain a single class; need at least one positive and one negative",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of doubled ranks of the positives; a tie group at 1-based ranks
    // lo..=hi shares the doubled rank lo + hi.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled * pos_in_group;
        i = j + 1;
    }
    let u2 = doubled_rank_sum - positives * (positives + 1);
    Ok(u2 as f64 / (2 * positives * negatives) as f64)
}
