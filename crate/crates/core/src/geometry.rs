//! Small fixed-size vector and rotation helpers generic over [`Real`].
//!
//! Points are `[T; 3]`, matrices are row-major `[[T; 3]; 3]`.

use crate::autodiff::Real;

pub type V3<T> = [T; 3];
pub type M3<T> = [[T; 3]; 3];

pub fn lift<T: Real>(v: &V3<f64>) -> V3<T> {
    [T::cst(v[0]), T::cst(v[1]), T::cst(v[2])]
}

pub fn lift_mat<T: Real>(m: &M3<f64>) -> M3<T> {
    [lift(&m[0]), lift(&m[1]), lift(&m[2])]
}

pub fn values<T: Real>(v: &V3<T>) -> V3<f64> {
    [v[0].value(), v[1].value(), v[2].value()]
}

pub fn add<T: Real>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Real>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Real>(a: &V3<T>, s: T) -> V3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot<T: Real>(a: &V3<T>, b: &V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Real>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Real>(a: &V3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn normalize<T: Real>(a: &V3<T>) -> V3<T> {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn mat_vec<T: Real>(m: &M3<T>, v: &V3<T>) -> V3<T> {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

/// `mᵀ v`
pub fn mat_t_vec<T: Real>(m: &M3<T>, v: &V3<T>) -> V3<T> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul<T: Real>(a: &M3<T>, b: &M3<T>) -> M3<T> {
    let mut out = [[T::cst(0.0); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Real>(m: &M3<T>) -> M3<T> {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn identity<T: Real>() -> M3<T> {
    let (o, z) = (T::cst(1.0), T::cst(0.0));
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Rotation matrix of an axis-angle vector (exponential map of so(3)).
pub fn exp_map<T: Real>(w: &V3<T>) -> M3<T> {
    let th2 = dot(w, w);
    let (a, b) = if th2.value() < 1e-12 {
        // series in θ² avoids the sqrt singularity at the origin
        (T::cst(1.0) - th2 / 6.0, T::cst(0.5) - th2 / 24.0)
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (T::cst(1.0) - th.cos()) / th2)
    };
    let z = T::cst(0.0);
    let k = [[z, -w[2], w[1]], [w[2], z, -w[0]], [-w[1], w[0], z]];
    let k2 = mat_mul(&k, &k);
    let mut r = identity::<T>();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = r[i][j] + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Axis-angle vector of a rotation matrix (inverse of [`exp_map`]).
pub fn log_map(r: &M3<f64>) -> V3<f64> {
    let cos = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let th = cos.acos();
    let v = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if th < 1e-9 {
        return [v[0] / 2.0, v[1] / 2.0, v[2] / 2.0];
    }
    if std::f64::consts::PI - th < 1e-6 {
        // near π: axis from the symmetric part
        let mut axis = [0.0; 3];
        let diag = [r[0][0], r[1][1], r[2][2]];
        let k = (0..3).max_by(|&a, &b| diag[a].total_cmp(&diag[b])).unwrap();
        axis[k] = ((diag[k] + 1.0) / 2.0).max(0.0).sqrt();
        for j in 0..3 {
            if j != k {
                axis[j] = (r[k][j] + r[j][k]) / (4.0 * axis[k]);
            }
        }
        let n = norm(&axis);
        return scale(&axis, th / n);
    }
    let s = th / (2.0 * th.sin());
    scale(&v, s)
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle_between(a: &M3<f64>, b: &M3<f64>) -> f64 {
    let rel = mat_mul(a, &transpose(b));
    // atan2 stays accurate near zero, where acos loses half the digits
    let sin2 = norm(&[
        rel[2][1] - rel[1][2],
        rel[0][2] - rel[2][0],
        rel[1][0] - rel[0][1],
    ]);
    sin2.atan2(rel[0][0] + rel[1][1] + rel[2][2] - 1.0)
}

pub fn rot_x(angle: f64) -> M3<f64> {
    exp_map(&[angle, 0.0, 0.0])
}

pub fn rot_y(angle: f64) -> M3<f64> {
    exp_map(&[0.0, angle, 0.0])
}

pub fn rot_z(angle: f64) -> M3<f64> {
    exp_map(&[0.0, 0.0, angle])
}

/// ‖RᵀR − I‖∞ and det(R).
pub fn orthonormality(r: &M3<f64>) -> (f64, f64) {
    let rtr = mat_mul(&transpose(r), r);
    let mut dev: f64 = 0.0;
    for (i, row) in rtr.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((v - target).abs());
        }
    }
    let det = dot(&r[0], &cross(&r[1], &r[2]));
    (dev, det)
}

/// Uniformly distributed random rotation.
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> M3<f64> {
    // unit quaternion from three uniforms (Shoemake)
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Random unit vector.
pub fn random_unit<R: rand::Rng + ?Sized>(rng: &mut R) -> V3<f64> {
    loop {
        let v: V3<f64> = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return scale(&v, 1.0 / n);
        }
    }
}
