// Axis-angle to rotation matrix, R = I + a·[r]x + b·[r]x², and its
// vector-Jacobian product. Below SERIES_CUTOFF the trigonometric
// coefficients are replaced by their Taylor series to avoid cancellation.

// The closed form of b'(θ)/θ loses about eps/θ⁴ to cancellation, so the
// series is used up to a fairly large angle.
const SERIES_CUTOFF: f64 = 0.1;

struct Coeffs {
    a: f64,
    b: f64,
    /// a'(θ)/θ
    c: f64,
    /// b'(θ)/θ
    d: f64,
}

fn coeffs(theta2: f64) -> Coeffs {
    if theta2.sqrt() < SERIES_CUTOFF {
        series(theta2)
    } else {
        closed_form(theta2)
    }
}

fn series(t: f64) -> Coeffs {
    Coeffs {
        a: 1.0 + t * (-1.0 / 6.0 + t * (1.0 / 120.0 + t * (-1.0 / 5040.0 + t / 362880.0))),
        b: 0.5 + t * (-1.0 / 24.0 + t * (1.0 / 720.0 + t * (-1.0 / 40320.0 + t / 3628800.0))),
        c: -1.0 / 3.0 + t * (1.0 / 30.0 + t * (-1.0 / 840.0 + t * (1.0 / 45360.0 - t / 3991680.0))),
        d: -1.0 / 12.0
            + t * (1.0 / 180.0 + t * (-1.0 / 6720.0 + t * (1.0 / 453600.0 - t / 47900160.0))),
    }
}

fn closed_form(theta2: f64) -> Coeffs {
    let theta = theta2.sqrt();
    let (s, co) = theta.sin_cos();
    Coeffs {
        a: s / theta,
        b: 2.0 * (0.5 * theta).sin().powi(2) / theta2,
        c: (theta * co - s) / (theta2 * theta),
        d: (theta * s - 2.0 * (1.0 - co)) / (theta2 * theta2),
    }
}

/// Rotation matrix (row-major) for an axis-angle vector.
pub fn rodrigues(r: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = r;
    let t2 = x * x + y * y + z * z;
    if t2 == 0.0 {
        return [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    }
    let Coeffs { a, b, .. } = coeffs(t2);
    // [r]x² = r rᵀ − θ² I
    [
        1.0 + b * (x * x - t2),
        -a * z + b * x * y,
        a * y + b * x * z,
        a * z + b * x * y,
        1.0 + b * (y * y - t2),
        -a * x + b * y * z,
        -a * y + b * x * z,
        a * x + b * y * z,
        1.0 + b * (z * z - t2),
    ]
}

/// Gradient of `⟨g, rodrigues(r)⟩` with respect to `r`.
pub fn rodrigues_vjp(r: [f64; 3], g: &[f64]) -> [f64; 3] {
    let t2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let Coeffs { a, b, c, d } = coeffs(t2);
    let gm = |i: usize, j: usize| g[3 * i + j];
    // ⟨g, E_m⟩ for the skew basis E_m = [e_m]x
    let w = [
        gm(2, 1) - gm(1, 2),
        gm(0, 2) - gm(2, 0),
        gm(1, 0) - gm(0, 1),
    ];
    let tr = gm(0, 0) + gm(1, 1) + gm(2, 2);
    let mut gr = [0.0; 3];
    let mut gtr = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            gr[i] += gm(i, j) * r[j];
            gtr[i] += gm(j, i) * r[j];
        }
    }
    let r_dot_w = r[0] * w[0] + r[1] * w[1] + r[2] * w[2];
    let rgr = r[0] * gr[0] + r[1] * gr[1] + r[2] * gr[2];
    let k2 = rgr - t2 * tr;
    let mut out = [0.0; 3];
    for m in 0..3 {
        out[m] =
            c * r[m] * r_dot_w + a * w[m] + d * r[m] * k2 + b * (gr[m] + gtr[m] - 2.0 * r[m] * tr);
    }
    out
}
