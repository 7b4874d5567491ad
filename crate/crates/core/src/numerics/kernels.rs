//! Forward and backward math kernels.
//!
//! Every kernel reduces each output element in a fixed sequential order, so
//! results are bitwise reproducible regardless of how many rayon threads
//! split the output rows.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

fn as_matrix<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a[m,k] · b[k,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    let kernel = |(i, row): (usize, &mut [T])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul_nt lhs")?;
    let (n, k2) = as_matrix(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_nt inner dims differ: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    let kernel = |(i, row): (usize, &mut [T])| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    Tensor::new(vec![m, n], out)
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(&a.transpose()?, b)
}

/// Gradients of `y = a · b` given `dy`: returns `(da, db)`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, _) = as_matrix(a, "matmul_backward a")?;
    let (_, n) = as_matrix(b, "matmul_backward b")?;
    if dy.shape() != [m, n] {
        return Err(Error::shape(format!(
            "matmul_backward upstream {:?}, expected [{m}, {n}]",
            dy.shape()
        )));
    }
    Ok((matmul_nt(dy, b)?, matmul_tn(a, dy)?))
}

/// Adds `bias[n]` to every row of `x[.., n]` in place.
pub fn add_row_bias<T: Real>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let n = x.cols();
    if bias.len() != n {
        return Err(Error::shape(format!(
            "bias of {} entries for rows of width {n}",
            bias.len()
        )));
    }
    for row in x.data_mut().chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// Column sums of `dy[.., n]`: the gradient of a broadcast row bias.
pub fn bias_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let n = dy.cols();
    let mut out = vec![T::zero(); n];
    for row in dy.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(vec![n], out).expect("bias shape")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    softmax_rows_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_rows_in_place<T: Real>(x: &mut Tensor<T>) -> Result<()> {
    let c = x.cols();
    for row in x.data_mut().chunks_mut(c) {
        softmax_slice(row)?;
    }
    Ok(())
}

pub(crate) fn softmax_slice<T: Real>(row: &mut [T]) -> Result<()> {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v.is_nan() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        max = max.max(v);
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
    Ok(())
}

/// Given softmax output `y` and upstream `dy`, returns `dx`.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    y.check_same_shape(dy, "softmax_backward")?;
    let c = y.cols();
    let mut dx = dy.clone();
    for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
        softmax_backward_slice(yrow, drow);
    }
    Ok(dx)
}

/// In-place `d ← y ⊙ (d − ⟨d, y⟩)`.
pub(crate) fn softmax_backward_slice<T: Real>(y: &[T], d: &mut [T]) {
    let mut dot = T::zero();
    for (&yv, &dv) in y.iter().zip(d.iter()) {
        dot += yv * dv;
    }
    for (dv, &yv) in d.iter_mut().zip(y) {
        *dv = yv * (*dv - dot);
    }
}

/// Per-row statistics saved by [`layernorm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn layernorm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(format!(
            "layernorm affine sizes {} / {} for width {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let n = T::of(d as f64);
    let eps = T::of(eps);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for (hrow, yrow) in xhat.data_mut().chunks_mut(d).zip(y.data_mut().chunks_mut(d)) {
        let mean = hrow.iter().copied().sum::<T>() / n;
        let var = hrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        for (j, (h, out)) in hrow.iter_mut().zip(yrow.iter_mut()).enumerate() {
            *h = (*h - mean) * is;
            *out = *h * gamma.data()[j] + beta.data()[j];
        }
        inv_std.push(is);
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    cache.xhat.check_same_shape(dy, "layernorm_backward")?;
    let d = dy.cols();
    let n = T::of(d as f64);
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dx = dy.clone();
    let rows = cache.xhat.data().chunks(d).zip(dy.data().chunks(d));
    for (r, ((hrow, dyrow), dxrow)) in rows.zip(dx.data_mut().chunks_mut(d)).enumerate() {
        let mut sum_g = T::zero();
        let mut sum_gh = T::zero();
        for j in 0..d {
            dgamma[j] += dyrow[j] * hrow[j];
            dbeta[j] += dyrow[j];
            let g = dyrow[j] * gamma.data()[j];
            sum_g += g;
            sum_gh += g * hrow[j];
        }
        let is = cache.inv_std[r];
        for j in 0..d {
            let g = dyrow[j] * gamma.data()[j];
            dxrow[j] = is * (g - sum_g / n - hrow[j] * sum_gh / n);
        }
    }
    Ok((
        dx,
        Tensor::new(vec![d], dgamma)?,
        Tensor::new(vec![d], dbeta)?,
    ))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let v = v.as_f64();
        T::of(v * std_normal_cdf(v))
    })
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_same_shape(dy, "gelu_backward")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let v = v.as_f64();
            g * T::of(std_normal_cdf(v) + v * std_normal_pdf(v))
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn assert_rel_close(got: &Tensor<f64>, want: &Tensor<f64>, tol: f64) {
        for (&g, &w) in got.data().iter().zip(want.data()) {
            let err = (g - w).abs() / w.abs().max(g.abs()).max(1e-3);
            assert!(err <= tol, "analytic {g} vs numeric {w} (rel {err:e})");
        }
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        let v = t(&[2, 1], &[0., 1.]);
        assert_eq!(matmul(&m, &v).unwrap().data(), &[2., 4.]);
        let z = matmul(&Tensor::<f64>::zeros(&[2, 3]), &a).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = Rng::new(3);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[6, 5], &mut rng);
        let c = random(&[4, 6], &mut rng);
        assert_eq!(
            matmul_nt(&a, &b).unwrap(),
            matmul(&a, &b.transpose().unwrap()).unwrap()
        );
        assert_eq!(
            matmul_tn(&a, &c).unwrap(),
            matmul(&a.transpose().unwrap(), &c).unwrap()
        );
    }

    #[test]
    fn matmul_is_thread_count_invariant() {
        let mut rng = Rng::new(11);
        let a: Tensor<f32> = random(&[96, 200], &mut rng).cast();
        let b: Tensor<f32> = random(&[200, 48], &mut rng).cast();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| matmul(&a, &b).unwrap())
        };
        let one = run(1);
        for threads in [2, 4, 7] {
            assert_eq!(run(threads), one);
        }
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t(&[1, 2], &[0., 0.])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&t(&[1, 2], &[1000., 1000.])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&t(&[1, 2], &[0., 3f64.ln()])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
        assert!(softmax_rows(&t(&[1, 2], &[f64::NAN, 0.])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let x: Tensor<f32> = random(&[7, 9], &mut rng).map(|v| v * 30.0).cast();
        let y = softmax_rows(&x).unwrap();
        for r in 0..7 {
            let s: f32 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layernorm_examples() {
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let (y, _) = layernorm(&t(&[1, 2], &[3., 3.]), &g, &b, LAYERNORM_EPS).unwrap();
        assert_eq!(y.data(), &[0., 0.]);
        let (y, _) = layernorm(&t(&[1, 2], &[1., -1.]), &g, &b, LAYERNORM_EPS).unwrap();
        let expect = 1.0 / (1.0 + LAYERNORM_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
        assert!((y.data()[1] + expect).abs() < 1e-12);
        let (y, _) = layernorm(
            &t(&[1, 2], &[1., -1.]),
            &Tensor::zeros(&[2]),
            &Tensor::full(&[2], 5.0),
            LAYERNORM_EPS,
        )
        .unwrap();
        assert_eq!(y.data(), &[5., 5.]);
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&t(&[3], &[0., 1., 10.]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746).abs() < 1e-8);
        assert!((y.data()[2] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        let w = random(&[5, 3], &mut rng);
        let (da, db) = matmul_backward(&a, &b, &w).unwrap();
        let na = numeric_grad(&a, |a| dot(&matmul(a, &b).unwrap(), &w));
        let nb = numeric_grad(&b, |b| dot(&matmul(&a, b).unwrap(), &w));
        assert_rel_close(&da, &na, 1e-6);
        assert_rel_close(&db, &nb, 1e-6);
    }

    #[test]
    fn matmul_backward_identity_passes_upstream() {
        let mut rng = Rng::new(2);
        let b = random(&[4, 4], &mut rng);
        let dy = random(&[4, 4], &mut rng);
        let (_, db) = matmul_backward(&Tensor::eye(4), &b, &dy).unwrap();
        assert_eq!(db, dy);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = Rng::new(22);
        let x = random(&[4, 6], &mut rng);
        let w = random(&[4, 6], &mut rng);
        let y = softmax_rows(&x).unwrap();
        let dx = softmax_backward(&y, &w).unwrap();
        let nx = numeric_grad(&x, |x| dot(&softmax_rows(x).unwrap(), &w));
        assert_rel_close(&dx, &nx, 1e-6);
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = Rng::new(23);
        let x = random(&[3, 8], &mut rng);
        let g = random(&[8], &mut rng);
        let b = random(&[8], &mut rng);
        let w = random(&[3, 8], &mut rng);
        let (_, cache) = layernorm(&x, &g, &b, LAYERNORM_EPS).unwrap();
        let (dx, dg, db) = layernorm_backward(&cache, &g, &w).unwrap();
        let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            dot(&layernorm(x, g, b, LAYERNORM_EPS).unwrap().0, &w)
        };
        assert_rel_close(&dx, &numeric_grad(&x, |x| f(x, &g, &b)), 1e-6);
        assert_rel_close(&dg, &numeric_grad(&g, |g| f(&x, g, &b)), 1e-6);
        assert_rel_close(&db, &numeric_grad(&b, |b| f(&x, &g, b)), 1e-6);
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let mut rng = Rng::new(24);
        let x = random(&[8, 8], &mut rng);
        let w = random(&[8, 8], &mut rng);
        let dx = gelu_backward(&x, &w).unwrap();
        assert_rel_close(&dx, &numeric_grad(&x, |x| dot(&gelu(x), &w)), 1e-6);
    }

    #[test]
    fn backward_kernels_in_f32_within_1e_3() {
        let mut rng = Rng::new(25);
        let x64 = random(&[4, 8], &mut rng);
        let w64 = random(&[4, 8], &mut rng);
        let (x, w): (Tensor<f32>, Tensor<f32>) = (x64.cast(), w64.cast());
        let y = softmax_rows(&x).unwrap();
        let dx: Tensor<f64> = softmax_backward(&y, &w).unwrap().cast();
        let nx = numeric_grad(&x64, |x| dot(&softmax_rows(x).unwrap(), &w64));
        assert_rel_close(&dx, &nx, 1e-3);
        let dg: Tensor<f64> = gelu_backward(&x, &w).unwrap().cast();
        assert_rel_close(&dg, &numeric_grad(&x64, |x| dot(&gelu(x), &w64)), 1e-3);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(26);
        let x = random(&[3, 4], &mut rng);
        let z = Tensor::<f64>::zeros(&[3, 4]);
        let y = softmax_rows(&x).unwrap();
        assert_eq!(softmax_backward(&y, &z).unwrap().max_abs(), 0.0);
        assert_eq!(gelu_backward(&x, &z).unwrap().max_abs(), 0.0);
        let g = Tensor::ones(&[4]);
        let (_, cache) = layernorm(&x, &g, &Tensor::zeros(&[4]), LAYERNORM_EPS).unwrap();
        let (dx, dg, db) = layernorm_backward(&cache, &g, &z).unwrap();
        assert_eq!(dx.max_abs() + dg.max_abs() + db.max_abs(), 0.0);
        let b = random(&[4, 2], &mut rng);
        let (da, db) = matmul_backward(&x, &b, &Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(da.max_abs() + db.max_abs(), 0.0);
    }
}
