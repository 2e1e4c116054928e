//! Bilinear resampling of single-channel planes.

/// Resizes an `h×w` plane to `oh×ow`.
///
/// With `align_corners` the corner samples of input and output coincide;
/// otherwise pixel centers are aligned (`src = (dst + 0.5)·scale − 0.5`).
pub fn bilinear(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize, align_corners: bool) -> Vec<f32> {
    debug_assert_eq!(plane.len(), h * w);
    let coord = |dst: usize, inp: usize, out: usize| -> f32 {
        if align_corners {
            if out == 1 {
                0.0
            } else {
                dst as f32 * (inp - 1) as f32 / (out - 1) as f32
            }
        } else {
            ((dst as f32 + 0.5) * inp as f32 / out as f32 - 0.5).clamp(0.0, (inp - 1) as f32)
        }
    };
    let axis = |dst: usize, inp: usize, out: usize| {
        let c = coord(dst, inp, out);
        let lo = (c.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, c - lo as f32)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = axis(x, w, ow);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
