//! Standard (fixed filter size) neural operations: same-padded convolution,
//! average pooling, rectification, and affine maps, each with an exact
//! backward pass.
//!
//! All reductions run in a fixed order per output element, so identical
//! inputs give bit-identical outputs call after call.

use crate::error::{Error, Result};
use crate::tensor::{FilterBank, Tensor};

/// Same-padded stride-1 convolution.
///
/// Output keeps the input's spatial dims for any odd filter size: the input
/// is zero-padded by `(s-1)/2` on each border. `bias` is per output channel.
pub fn conv2d_same(input: &Tensor, filters: &FilterBank, bias: &[f64]) -> Result<Tensor> {
    let (b, cin, h, w) = input.dims4("conv2d_same input")?;
    if filters.in_channels != cin {
        return Err(Error::shape(
            "conv2d_same",
            format!("input channels {}", filters.in_channels),
            format!("input channels {cin} (input {:?})", input.shape),
        ));
    }
    if bias.len() != filters.out_channels {
        return Err(Error::shape(
            "conv2d_same bias",
            format!("{} entries", filters.out_channels),
            format!("{} entries", bias.len()),
        ));
    }
    let cout = filters.out_channels;
    let s = filters.size;
    let r = s / 2;
    let mut out = Tensor::zeros(vec![b, cout, h, w]);

    for bi in 0..b {
        for co in 0..cout {
            let out_base = out.at4(bi, co, 0, 0);
            let out_plane = &mut out.data[out_base..out_base + h * w];
            out_plane.fill(bias[co]);
            for ci in 0..cin {
                let in_base = input.at4(bi, ci, 0, 0);
                let in_plane = &input.data[in_base..in_base + h * w];
                let taps = filters.tap_slice(co, ci);
                accumulate_taps(out_plane, in_plane, taps, s, r, h, w);
            }
        }
    }
    Ok(out)
}

/// Adds `w_tap * shifted(in_plane)` into `out_plane` for every filter tap.
///
/// For tap (dy, dx), output (y, x) reads input (y + dy - r, x + dx - r);
/// out-of-range reads are the zero padding and are skipped. Taps that are
/// exactly zero contribute nothing and are skipped outright.
#[inline]
fn accumulate_taps(
    out_plane: &mut [f64],
    in_plane: &[f64],
    taps: &[f64],
    s: usize,
    r: usize,
    h: usize,
    w: usize,
) {
    for dy in 0..s {
        for dx in 0..s {
            let wt = taps[dy * s + dx];
            if wt == 0.0 {
                continue;
            }
            // y + dy - r in [0, h)  =>  y in [max(0, r-dy), min(h, h+r-dy))
            let y0 = r.saturating_sub(dy);
            let y1 = (h + r).saturating_sub(dy).min(h);
            let x0 = r.saturating_sub(dx);
            let x1 = (w + r).saturating_sub(dx).min(w);
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let iy = y + dy - r;
                let ix0 = x0 + dx - r;
                let dst = &mut out_plane[y * w + x0..y * w + x1];
                let src = &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wt * v;
                }
            }
        }
    }
}

/// Gradients of [`conv2d_same`] given the forward input and the upstream
/// gradient: (d/d input, d/d filter weights, d/d bias).
pub fn conv2d_same_backward(
    input: &Tensor,
    filters: &FilterBank,
    upstream: &Tensor,
    want_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Vec<f64>)> {
    let (b, cin, h, w) = input.dims4("conv2d_same_backward input")?;
    let (ub, uc, uh, uw) = upstream.dims4("conv2d_same_backward upstream")?;
    if (ub, uc, uh, uw) != (b, filters.out_channels, h, w) {
        return Err(Error::shape(
            "conv2d_same_backward",
            format!("upstream [{b}, {}, {h}, {w}]", filters.out_channels),
            format!("{:?}", upstream.shape),
        ));
    }
    let cout = filters.out_channels;
    let s = filters.size;
    let r = s / 2;

    let mut grad_bias = vec![0.0; cout];
    for bi in 0..b {
        for co in 0..cout {
            let base = upstream.at4(bi, co, 0, 0);
            grad_bias[co] += upstream.data[base..base + h * w].iter().sum::<f64>();
        }
    }

    let mut grad_w = Tensor::zeros(vec![cout, cin, s, s]);
    for co in 0..cout {
        for ci in 0..cin {
            for dy in 0..s {
                for dx in 0..s {
                    let y0 = r.saturating_sub(dy);
                    let y1 = (h + r).saturating_sub(dy).min(h);
                    let x0 = r.saturating_sub(dx);
                    let x1 = (w + r).saturating_sub(dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let up_base = upstream.at4(bi, co, 0, 0);
                        let in_base = input.at4(bi, ci, 0, 0);
                        for y in y0..y1 {
                            let iy = y + dy - r;
                            let ix0 = x0 + dx - r;
                            let up_row = &upstream.data[up_base + y * w + x0..up_base + y * w + x1];
                            let in_row =
                                &input.data[in_base + iy * w + ix0..in_base + iy * w + ix0 + (x1 - x0)];
                            for (&u, &v) in up_row.iter().zip(in_row) {
                                acc += u * v;
                            }
                        }
                    }
                    grad_w.data[filters.at(co, ci, dy, dx)] = acc;
                }
            }
        }
    }

    let grad_in = if want_input_grad {
        let mut gin = Tensor::zeros(vec![b, cin, h, w]);
        for bi in 0..b {
            for ci in 0..cin {
                let gin_base = gin.at4(bi, ci, 0, 0);
                let gin_plane = &mut gin.data[gin_base..gin_base + h * w];
                for co in 0..cout {
                    let up_base = upstream.at4(bi, co, 0, 0);
                    let up_plane = &upstream.data[up_base..up_base + h * w];
                    let taps = filters.tap_slice(co, ci);
                    // d/d input is the correlation with the 180-degree
                    // rotated filter: input (y, x) feeds output (y - dy + r,
                    // x - dx + r) through tap (dy, dx).
                    for dy in 0..s {
                        for dx in 0..s {
                            let wt = taps[dy * s + dx];
                            if wt == 0.0 {
                                continue;
                            }
                            let y0 = dy.saturating_sub(r);
                            let y1 = (h + dy).saturating_sub(r).min(h);
                            let x0 = dx.saturating_sub(r);
                            let x1 = (w + dx).saturating_sub(r).min(w);
                            if x0 >= x1 {
                                continue;
                            }
                            for y in y0..y1 {
                                let uy = y + r - dy;
                                let ux0 = x0 + r - dx;
                                let dst = &mut gin_plane[y * w + x0..y * w + x1];
                                let src = &up_plane[uy * w + ux0..uy * w + ux0 + (x1 - x0)];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += wt * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(gin)
    } else {
        None
    };

    Ok((grad_in, grad_w, grad_bias))
}

/// Average pooling with no padding; windows overhanging the input are
/// dropped, so output dims are `floor((H - window) / stride) + 1`.
pub fn avg_pool(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("avg_pool input")?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "avg_pool window and stride must be >= 1, got window={window} stride={stride}"
        )));
    }
    if window > h || window > w {
        return Err(Error::InvalidArgument(format!(
            "avg_pool window {window} exceeds input extent {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let inv = 1.0 / (window * window) as f64;
    let mut out = Tensor::zeros(vec![b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let in_base = input.at4(bi, ci, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..window {
                        let row = in_base + (oy * stride + ky) * w + ox * stride;
                        for &v in &input.data[row..row + window] {
                            acc += v;
                        }
                    }
                    let off = out.at4(bi, ci, oy, ox);
                    out.data[off] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`avg_pool`] with respect to its input.
pub fn avg_pool_backward(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    upstream: &Tensor,
) -> Result<Tensor> {
    let mut gin = Tensor::zeros(input_shape.to_vec());
    let (b, c, _h, w) = gin.dims4("avg_pool_backward input")?;
    let (ub, uc, oh, ow) = upstream.dims4("avg_pool_backward upstream")?;
    if ub != b || uc != c {
        return Err(Error::shape(
            "avg_pool_backward",
            format!("[{b}, {c}, ..]"),
            format!("{:?}", upstream.shape),
        ));
    }
    let inv = 1.0 / (window * window) as f64;
    for bi in 0..b {
        for ci in 0..c {
            let gin_base = gin.at4(bi, ci, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = upstream.data[upstream.at4(bi, ci, oy, ox)] * inv;
                    for ky in 0..window {
                        let row = gin_base + (oy * stride + ky) * w + ox * stride;
                        for v in &mut gin.data[row..row + window] {
                            *v += g;
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Backward of [`relu`]: upstream masked by the active (x > 0) region.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
            .collect(),
    }
}

/// Row-wise affine map: `out[b] = weights * in[b] + bias`,
/// with `input [B,N]`, `weights [M,N]`, `bias [M]`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (b, n) = input.dims2("linear input")?;
    let (m, wn) = weights.dims2("linear weights")?;
    if wn != n || bias.len() != m {
        return Err(Error::shape(
            "linear",
            format!("weights [{m}, {n}], bias [{m}]"),
            format!("weights {:?}, bias [{}]", weights.shape, bias.len()),
        ));
    }
    let mut out = Tensor::zeros(vec![b, m]);
    for bi in 0..b {
        let in_row = &input.data[bi * n..(bi + 1) * n];
        for mi in 0..m {
            let w_row = &weights.data[mi * n..(mi + 1) * n];
            let mut acc = bias[mi];
            for (&wv, &xv) in w_row.iter().zip(in_row) {
                acc += wv * xv;
            }
            out.data[bi * m + mi] = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`linear`]: (d/d input, d/d weights, d/d bias).
pub fn linear_backward(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (b, n) = input.dims2("linear_backward input")?;
    let (m, _) = weights.dims2("linear_backward weights")?;
    let (ub, um) = upstream.dims2("linear_backward upstream")?;
    if ub != b || um != m {
        return Err(Error::shape(
            "linear_backward",
            format!("upstream [{b}, {m}]"),
            format!("{:?}", upstream.shape),
        ));
    }
    let mut gin = Tensor::zeros(vec![b, n]);
    let mut gw = Tensor::zeros(vec![m, n]);
    let mut gb = vec![0.0; m];
    for bi in 0..b {
        let in_row = &input.data[bi * n..(bi + 1) * n];
        for mi in 0..m {
            let u = upstream.data[bi * m + mi];
            gb[mi] += u;
            let w_row = &weights.data[mi * n..(mi + 1) * n];
            let gin_row = &mut gin.data[bi * n..(bi + 1) * n];
            for (g, &wv) in gin_row.iter_mut().zip(w_row) {
                *g += u * wv;
            }
            let gw_row = &mut gw.data[mi * n..(mi + 1) * n];
            for (g, &xv) in gw_row.iter_mut().zip(in_row) {
                *g += u * xv;
            }
        }
    }
    Ok((gin, gw, gb))
}
