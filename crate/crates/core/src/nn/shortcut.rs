use crate::bconv::RealTensor;
use crate::error::{invalid, Result};
use crate::nn::Shape;

/// Parameter-free residual mapping onto `dst`: identity, or 2×2 average
/// pooling when the spatial dims halve; channels beyond the source are zero.
pub fn shortcut_type_a(src: &RealTensor, dst: Shape) -> Result<RealTensor> {
    let same = src.h == dst.h && src.w == dst.w;
    let halves = src.h == 2 * dst.h && src.w == 2 * dst.w;
    if !(same || halves) || dst.c < src.c {
        return Err(invalid(format!("cannot map a {}x{}x{} residual onto {dst}", src.h, src.w, src.c)));
    }
    let mut out = RealTensor::zeros(dst.h, dst.w, src.n, dst.c);
    for y in 0..dst.h {
        for x in 0..dst.w {
            for n in 0..src.n {
                for c in 0..src.c {
                    let v = if same {
                        src.get(y, x, n, c)
                    } else {
                        let (a, b) = (2 * y, 2 * x);
                        (src.get(a, b, n, c)
                            + src.get(a, b + 1, n, c)
                            + src.get(a + 1, b, n, c)
                            + src.get(a + 1, b + 1, n, c))
                            / 4.0
                    };
                    out.set(y, x, n, c, v);
                }
            }
        }
    }
    Ok(out)
}
