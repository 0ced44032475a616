use std::fmt::Debug;

use num_traits::Float;

/// Floating-point types the network can run in. Training uses `f32`; the
/// `f64` instantiation exists for gradient checking.
pub trait Real: Float + Debug + Send + Sync + 'static {
    /// `C ← α·A·B + β·C` for an `m×k` by `k×n` product with arbitrary strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping buffers
    /// of the stated shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// `C = A·B` (`beta = 0`) or `C += A·B` (`beta = 1`), row-major, with either
/// operand optionally transposed. `A` is logically `m×k`, `B` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds checked above; c does not alias a or b.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Offsets of each layer's weight matrix and bias inside the flat vector.
/// Layer `l` stores an `in × out` row-major matrix followed by `out` biases.
pub(crate) fn layer_offsets(layers: &[usize]) -> Vec<(usize, usize)> {
    let mut off = 0;
    layers
        .windows(2)
        .map(|w| {
            let weights = off;
            let bias = off + w[0] * w[1];
            off = bias + w[1];
            (weights, bias)
        })
        .collect()
}

pub(crate) fn param_count(layers: &[usize]) -> usize {
    layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Fully connected ReLU network with a softmax output, plus the scratch
/// buffers for one mini-batch.
#[derive(Debug)]
pub struct Mlp<T> {
    layers: Vec<usize>,
    offsets: Vec<(usize, usize)>,
    /// post-activation outputs of every layer; the last one holds logits
    acts: Vec<Vec<T>>,
    deltas: Vec<Vec<T>>,
    batch: usize,
}

impl<T: Real> Mlp<T> {
    pub fn new(layers: &[usize]) -> Self {
        assert!(layers.len() >= 2, "a network needs input and output widths");
        Self {
            layers: layers.to_vec(),
            offsets: layer_offsets(layers),
            acts: vec![Vec::new(); layers.len() - 1],
            deltas: vec![Vec::new(); layers.len() - 1],
            batch: 0,
        }
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.layers)
    }

    fn reserve(&mut self, batch: usize) {
        self.batch = batch;
        for (l, width) in self.layers[1..].iter().enumerate() {
            self.acts[l].resize(batch * width, T::zero());
            self.deltas[l].resize(batch * width, T::zero());
        }
    }

    /// Forward pass over `batch` rows of `x`; returns the logits (`batch × out`).
    pub fn forward(&mut self, params: &[T], x: &[T], batch: usize) -> &[T] {
        assert_eq!(params.len(), self.param_count());
        assert_eq!(x.len(), batch * self.layers[0]);
        self.reserve(batch);
        let n_layers = self.offsets.len();
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.layers[l], self.layers[l + 1]);
            let (w_off, b_off) = self.offsets[l];
            let w = &params[w_off..w_off + fan_in * fan_out];
            let bias = &params[b_off..b_off + fan_out];
            let (before, rest) = self.acts.split_at_mut(l);
            let out = &mut rest[0];
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bias);
            }
            let input: &[T] = if l == 0 { x } else { &before[l - 1] };
            matmul(batch, fan_in, fan_out, input, false, w, false, out, true);
            if l + 1 < n_layers {
                for v in out.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
        }
        &self.acts[n_layers - 1]
    }

    /// Mean cross-entropy over the batch, plus `μ/2 ‖w − anchor‖²` when a
    /// proximal anchor is given. Writes the full gradient into `grad`.
    pub fn loss_and_gradient(
        &mut self,
        params: &[T],
        x: &[T],
        labels: &[usize],
        prox: Option<(&[T], T)>,
        grad: &mut [T],
    ) -> f64 {
        let batch = labels.len();
        let n_layers = self.offsets.len();
        let n_out = *self.layers.last().unwrap();
        self.forward(params, x, batch);
        let scale = T::from_f64(1.0 / batch as f64);

        let mut loss = 0.0;
        {
            let logits = &self.acts[n_layers - 1];
            let delta = &mut self.deltas[n_layers - 1];
            for (r, &y) in labels.iter().enumerate() {
                let z = &logits[r * n_out..(r + 1) * n_out];
                let d = &mut delta[r * n_out..(r + 1) * n_out];
                let max = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut sum = T::zero();
                for (dv, &zv) in d.iter_mut().zip(z) {
                    *dv = (zv - max).exp();
                    sum = sum + *dv;
                }
                loss += (sum.ln() + max - z[y]).to_f64();
                for dv in d.iter_mut() {
                    *dv = *dv / sum * scale;
                }
                d[y] = d[y] - scale;
            }
        }
        loss /= batch as f64;

        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layers[l], self.layers[l + 1]);
            let (w_off, b_off) = self.offsets[l];
            let (lower, upper) = self.deltas.split_at_mut(l);
            let delta = &upper[0];
            let input: &[T] = if l == 0 { x } else { &self.acts[l - 1] };
            let (g_w, g_rest) = grad[w_off..].split_at_mut(fan_in * fan_out);
            matmul(fan_in, batch, fan_out, input, true, delta, false, g_w, false);
            let g_b = &mut g_rest[..fan_out];
            g_b.iter_mut().for_each(|g| *g = T::zero());
            for row in delta.chunks_exact(fan_out) {
                for (g, &d) in g_b.iter_mut().zip(row) {
                    *g = *g + d;
                }
            }
            debug_assert_eq!(b_off, w_off + fan_in * fan_out);
            if l > 0 {
                let w = &params[w_off..w_off + fan_in * fan_out];
                let prev = &mut lower[l - 1];
                matmul(batch, fan_out, fan_in, delta, false, w, true, prev, false);
                for (p, &a) in prev.iter_mut().zip(&self.acts[l - 1]) {
                    if a <= T::zero() {
                        *p = T::zero();
                    }
                }
            }
        }

        if let Some((anchor, mu)) = prox {
            if mu > T::zero() {
                let mut sq = 0.0;
                for ((g, &w), &a) in grad.iter_mut().zip(params).zip(anchor) {
                    let d = w - a;
                    *g = *g + mu * d;
                    sq += d.to_f64() * d.to_f64();
                }
                loss += 0.5 * mu.to_f64() * sq;
            }
        }
        loss
    }
}
