//! Selective state-space layer: input-dependent `B`, `C` and step size,
//! zero-order-hold discretization of a diagonal `A`, a sequential scan and
//! the gated block around it.

use std::rc::Rc;

use ndarray::Axis;
use rand::Rng;

use crate::autodiff::{CustomOp, Mat, Tape, Var};
use crate::error::{Error, Result};

/// Below this `|delta * A|` the hold factor switches to its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `Bbar = (dA)^-1 (exp(dA) - I) dB`
    #[default]
    ZeroOrderHold,
    /// `Bbar = dB`
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub expand: usize,
    pub state: usize,
    pub discretization: Discretization,
    /// Kernel width of the optional depthwise causal convolution.
    pub conv_kernel: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl SsmConfig {
    pub fn new(d_model: usize, state: usize) -> Self {
        Self {
            d_model,
            expand: 2,
            state,
            discretization: Discretization::ZeroOrderHold,
            conv_kernel: None,
            dt_min: 0.01,
            dt_max: 0.1,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.d_model * self.expand
    }
}

/// Learnable tensors of one gated selective-scan block. `T` is `Mat` for
/// values, a tape `Var` while differentiating, or a store handle.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T = Mat> {
    /// `d_inner x state`; `A = -exp(a_log)`.
    pub a_log: T,
    pub w_in: T,
    pub w_gate: T,
    pub w_b: T,
    pub w_c: T,
    pub w_delta: T,
    /// `1 x d_inner`
    pub b_delta: T,
    pub w_out: T,
    /// `(kernel x d_inner, 1 x d_inner)`
    pub conv: Option<(T, T)>,
}

impl<T> SsmParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> SsmParams<U> {
        SsmParams {
            a_log: f("a_log", &self.a_log),
            w_in: f("w_in", &self.w_in),
            w_gate: f("w_gate", &self.w_gate),
            w_b: f("w_b", &self.w_b),
            w_c: f("w_c", &self.w_c),
            w_delta: f("w_delta", &self.w_delta),
            b_delta: f("b_delta", &self.b_delta),
            w_out: f("w_out", &self.w_out),
            conv: self
                .conv
                .as_ref()
                .map(|(w, b)| (f("conv_w", w), f("conv_b", b))),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &T)> {
        let mut v = vec![
            ("a_log", &self.a_log),
            ("w_in", &self.w_in),
            ("w_gate", &self.w_gate),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("w_delta", &self.w_delta),
            ("b_delta", &self.b_delta),
            ("w_out", &self.w_out),
        ];
        if let Some((w, b)) = &self.conv {
            v.push(("conv_w", w));
            v.push(("conv_b", b));
        }
        v
    }
}

pub(crate) fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// `x` such that `softplus(x) = y`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams<Mat> {
    /// Linear maps uniform in `+-1/sqrt(fan_in)`, `A` rows set to
    /// `-(1..=state)`, step-size bias so that `softplus(bias)` is
    /// log-uniform in `[dt_min, dt_max]`.
    pub fn init<R: Rng>(cfg: &SsmConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let di = cfg.d_inner();
        let s = cfg.state;
        let lin = |rng: &mut R, fan_in: usize, fan_out: usize| {
            uniform_matrix(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
        };
        let a_log = Mat::from_shape_fn((di, s), |(_, j)| ((j + 1) as f64).ln());
        let w_in = lin(rng, d, di);
        let w_gate = lin(rng, d, di);
        let w_b = lin(rng, di, s);
        let w_c = lin(rng, di, s);
        let w_delta = lin(rng, di, di);
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let b_delta = Mat::from_shape_fn((1, di), |_| {
            let dt = rng.random_range(lo..=hi).exp();
            inverse_softplus(dt)
        });
        let w_out = lin(rng, di, d);
        let conv = cfg.conv_kernel.map(|k| {
            let bound = 1.0 / (k as f64).sqrt();
            (
                uniform_matrix(rng, k, di, bound),
                uniform_matrix(rng, 1, di, bound),
            )
        });
        Self {
            a_log,
            w_in,
            w_gate,
            w_b,
            w_c,
            w_delta,
            b_delta,
            w_out,
            conv,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> SsmParams<Var> {
        self.map(|_, m| tape.leaf(m.clone()))
    }

    /// Diagonal state matrix `A = -exp(a_log)`.
    pub fn a(&self) -> Mat {
        self.a_log.mapv(|v| -v.exp())
    }
}

/// `(exp(z) - 1) / z` by its Taylor series `1 + z/2 + z^2/6 + z^3/24`.
pub fn hold_factor_series(z: f64) -> f64 {
    1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))
}

/// `(exp(z) - 1) / z` evaluated directly.
pub fn hold_factor_exact(z: f64) -> f64 {
    z.exp_m1() / z
}

/// `(exp(z) - 1) / z`, continuous at zero.
pub fn hold_factor(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        hold_factor_series(z)
    } else {
        hold_factor_exact(z)
    }
}

/// Derivative of [`hold_factor`].
fn hold_factor_deriv(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        // sum_k (k+1) z^k / (k+2)!
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z / 840.0))))
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// Discretizes one diagonal entry: returns `(Abar, Bbar)`.
pub fn discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    discretize_with(a, b, delta, Discretization::ZeroOrderHold)
}

pub fn discretize_with(a: f64, b: f64, delta: f64, mode: Discretization) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "step size must be positive, got {delta}"
        )));
    }
    let z = delta * a;
    let abar = z.exp();
    let bbar = match mode {
        Discretization::ZeroOrderHold => hold_factor(z) * delta * b,
        Discretization::Euler => delta * b,
    };
    Ok((abar, bbar))
}

/// Per-element quantities kept from the forward scan, laid out `[t][d][s]`.
#[derive(Debug, Clone, Default)]
struct ScanCache {
    states: Vec<f64>,
    abar: Vec<f64>,
    /// Hold factor `(exp(z) - 1) / z`; empty for Euler.
    phi: Vec<f64>,
}

fn standard(m: &Mat) -> std::borrow::Cow<'_, [f64]> {
    match m.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(m.iter().copied().collect()),
    }
}

/// Recurrence over each `(start, end)` row segment independently.
///
/// Shapes: `u, dt: L x D`, `a: D x S`, `b, c: L x S`. Returns `y: L x D`
/// and every hidden state, laid out `[t][d][s]`.
pub fn scan_kernel(
    u: &Mat,
    dt: &Mat,
    a: &Mat,
    b: &Mat,
    c: &Mat,
    segments: &[(usize, usize)],
    mode: Discretization,
) -> Result<(Mat, Vec<f64>)> {
    scan_forward(u, dt, a, b, c, segments, mode).map(|(y, cache)| (y, cache.states))
}

fn scan_forward(
    u: &Mat,
    dt: &Mat,
    a: &Mat,
    b: &Mat,
    c: &Mat,
    segments: &[(usize, usize)],
    mode: Discretization,
) -> Result<(Mat, ScanCache)> {
    let (l, d) = u.dim();
    let s = a.ncols();
    if dt.dim() != (l, d) || a.nrows() != d || b.dim() != (l, s) || c.dim() != (l, s) {
        return Err(Error::Shape(format!(
            "scan: u {:?} dt {:?} a {:?} b {:?} c {:?}",
            u.dim(),
            dt.dim(),
            a.dim(),
            b.dim(),
            c.dim()
        )));
    }
    let (u, dt, a, b, c) = (
        standard(u),
        standard(dt),
        standard(a),
        standard(b),
        standard(c),
    );
    let zoh = mode == Discretization::ZeroOrderHold;
    let mut y = vec![0.0; l * d];
    let mut states = vec![0.0; l * d * s];
    let mut abar_all = vec![0.0; l * d * s];
    let mut phi_all = if zoh {
        vec![0.0; l * d * s]
    } else {
        Vec::new()
    };
    for &(start, end) in segments {
        for t in start..end {
            let (prev, cur) = states.split_at_mut(t * d * s);
            let cur = &mut cur[..d * s];
            let prev = (t > start).then(|| &prev[(t - 1) * d * s..]);
            let bt = &b[t * s..(t + 1) * s];
            let ct = &c[t * s..(t + 1) * s];
            for ch in 0..d {
                let step = dt[t * d + ch];
                let x = u[t * d + ch];
                let ach = &a[ch * s..(ch + 1) * s];
                let base = t * d * s + ch * s;
                let mut acc = 0.0;
                for k in 0..s {
                    let z = step * ach[k];
                    let abar = z.exp();
                    let bbar = if zoh {
                        let phi = hold_factor(z);
                        phi_all[base + k] = phi;
                        phi * step * bt[k]
                    } else {
                        step * bt[k]
                    };
                    let hp = prev.map_or(0.0, |p| p[ch * s + k]);
                    let h = abar * hp + bbar * x;
                    abar_all[base + k] = abar;
                    cur[ch * s + k] = h;
                    acc += ct[k] * h;
                }
                if !acc.is_finite() {
                    return Err(Error::NonFinite {
                        location: format!("selective scan at position {t}, channel {ch}"),
                    });
                }
                y[t * d + ch] = acc;
            }
        }
    }
    let y = Mat::from_shape_vec((l, d), y).expect("sized");
    Ok((
        y,
        ScanCache {
            states,
            abar: abar_all,
            phi: phi_all,
        },
    ))
}

struct ScanOp {
    segments: Rc<[(usize, usize)]>,
    mode: Discretization,
    cache: ScanCache,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, gy: &Mat) -> Vec<Option<Mat>> {
        let (l, d) = inputs[0].dim();
        let s = inputs[2].ncols();
        let (u, dt, a, b, c) = (
            standard(inputs[0]),
            standard(inputs[1]),
            standard(inputs[2]),
            standard(inputs[3]),
            standard(inputs[4]),
        );
        let gy = standard(gy);
        let zoh = self.mode == Discretization::ZeroOrderHold;
        let mut gu = vec![0.0; l * d];
        let mut gdt = vec![0.0; l * d];
        let mut ga = vec![0.0; d * s];
        let mut gb = vec![0.0; l * s];
        let mut gc = vec![0.0; l * s];
        let ScanCache {
            states: st,
            abar: abar_all,
            phi: phi_all,
        } = &self.cache;
        let mut carry = vec![0.0; d * s];
        for &(start, end) in self.segments.iter() {
            carry.iter_mut().for_each(|v| *v = 0.0);
            for t in (start..end).rev() {
                for ch in 0..d {
                    let step = dt[t * d + ch];
                    let x = u[t * d + ch];
                    let g = gy[t * d + ch];
                    let base = t * d * s + ch * s;
                    let (mut gu_acc, mut gdt_acc) = (0.0, 0.0);
                    for k in 0..s {
                        let idx = ch * s + k;
                        let h = st[base + k];
                        let hp = if t > start { st[base + k - d * s] } else { 0.0 };
                        let ak = a[idx];
                        let z = step * ak;
                        let abar = abar_all[base + k];
                        let dh = carry[idx] + c[t * s + k] * g;
                        gc[t * s + k] += g * h;
                        let d_bbar = dh * x;
                        let mut dz = dh * hp * abar;
                        let bk = b[t * s + k];
                        let bbar = if zoh {
                            let phi = phi_all[base + k];
                            let dphi = if z.abs() < 1e-2 {
                                hold_factor_deriv(z)
                            } else {
                                (abar - phi) / z
                            };
                            dz += d_bbar * dphi * step * bk;
                            gdt_acc += d_bbar * phi * bk;
                            gb[t * s + k] += d_bbar * phi * step;
                            phi * step * bk
                        } else {
                            gdt_acc += d_bbar * bk;
                            gb[t * s + k] += d_bbar * step;
                            step * bk
                        };
                        gu_acc += dh * bbar;
                        gdt_acc += dz * ak;
                        ga[idx] += dz * step;
                        carry[idx] = dh * abar;
                    }
                    gu[t * d + ch] += gu_acc;
                    gdt[t * d + ch] += gdt_acc;
                }
            }
        }
        let m = |r: usize, cols: usize, v: Vec<f64>| {
            Some(Mat::from_shape_vec((r, cols), v).expect("sized"))
        };
        vec![
            m(l, d, gu),
            m(l, d, gdt),
            m(d, s, ga),
            m(l, s, gb),
            m(l, s, gc),
        ]
    }
}

/// Records the scan on the tape. `a` is the (negative) diagonal state matrix.
#[allow(clippy::too_many_arguments)]
pub fn scan_on_tape(
    tape: &mut Tape,
    u: Var,
    dt: Var,
    a: Var,
    b: Var,
    c: Var,
    segments: Rc<[(usize, usize)]>,
    mode: Discretization,
) -> Result<Var> {
    let (y, cache) = scan_forward(
        tape.value(u),
        tape.value(dt),
        tape.value(a),
        tape.value(b),
        tape.value(c),
        &segments,
        mode,
    )?;
    Ok(tape.custom(
        vec![u, dt, a, b, c],
        y,
        Box::new(ScanOp {
            segments,
            mode,
            cache,
        }),
    ))
}

struct CausalConvOp {
    segments: Rc<[(usize, usize)]>,
}

fn causal_conv(x: &Mat, w: &Mat, bias: &Mat, segments: &[(usize, usize)]) -> Mat {
    let (_, d) = x.dim();
    let k = w.nrows();
    let mut y = Mat::zeros(x.raw_dim());
    for &(start, end) in segments {
        for t in start..end {
            for ch in 0..d {
                let mut acc = bias[[0, ch]];
                for j in 0..k.min(t - start + 1) {
                    acc += w[[j, ch]] * x[[t - j, ch]];
                }
                y[[t, ch]] = acc;
            }
        }
    }
    y
}

impl CustomOp for CausalConvOp {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, gy: &Mat) -> Vec<Option<Mat>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (_, d) = x.dim();
        let k = w.nrows();
        let mut gx = Mat::zeros(x.raw_dim());
        let mut gw = Mat::zeros(w.raw_dim());
        for &(start, end) in self.segments.iter() {
            for t in start..end {
                for ch in 0..d {
                    let g = gy[[t, ch]];
                    for j in 0..k.min(t - start + 1) {
                        gx[[t - j, ch]] += w[[j, ch]] * g;
                        gw[[j, ch]] += x[[t - j, ch]] * g;
                    }
                }
            }
        }
        let gb = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
        vec![Some(gx), Some(gw), Some(gb)]
    }
}

/// Depthwise causal convolution along each segment: `y[t] = b + sum_j w[j] * x[t - j]`.
pub fn causal_conv_on_tape(
    tape: &mut Tape,
    x: Var,
    w: Var,
    bias: Var,
    segments: Rc<[(usize, usize)]>,
) -> Var {
    let y = causal_conv(tape.value(x), tape.value(w), tape.value(bias), &segments);
    tape.custom(vec![x, w, bias], y, Box::new(CausalConvOp { segments }))
}

/// Input-dependent `(dt, B, C)` for scan input `x` (`L x d_inner`).
pub fn selection_on_tape(tape: &mut Tape, x: Var, p: &SsmParams<Var>) -> (Var, Var, Var) {
    let b = tape.matmul(x, p.w_b);
    let c = tape.matmul(x, p.w_c);
    let pre = tape.matmul(x, p.w_delta);
    let pre = tape.add_row(pre, p.b_delta);
    let dt = tape.softplus(pre);
    (dt, b, c)
}

fn state_matrix_on_tape(tape: &mut Tape, a_log: Var) -> Var {
    let e = tape.exp(a_log);
    tape.scale(e, -1.0)
}

/// Selective scan of `x` (`L x d_inner`), with `B`, `C` and the step size
/// computed from `x` itself.
pub fn selective_scan_on_tape(
    tape: &mut Tape,
    x: Var,
    p: &SsmParams<Var>,
    segments: Rc<[(usize, usize)]>,
    mode: Discretization,
) -> Result<Var> {
    let (dt, b, c) = selection_on_tape(tape, x, p);
    let a = state_matrix_on_tape(tape, p.a_log);
    scan_on_tape(tape, x, dt, a, b, c, segments, mode)
}

/// Gated block: `W_out((scan(silu(conv?(X W_in)))) * silu(X W_gate))`.
pub fn mamba_on_tape(
    tape: &mut Tape,
    x: Var,
    p: &SsmParams<Var>,
    segments: Rc<[(usize, usize)]>,
    mode: Discretization,
) -> Result<Var> {
    let mut u = tape.matmul(x, p.w_in);
    if let Some((w, b)) = p.conv {
        u = causal_conv_on_tape(tape, u, w, b, segments.clone());
    }
    let u = tape.silu(u);
    let z = tape.matmul(x, p.w_gate);
    let z = tape.silu(z);
    let y = selective_scan_on_tape(tape, u, p, segments, mode)?;
    let gated = tape.mul(y, z);
    Ok(tape.matmul(gated, p.w_out))
}

fn check_width(x: &Mat, want: usize, what: &str) -> Result<()> {
    if x.ncols() != want {
        return Err(Error::Shape(format!(
            "{what}: input has {} columns, expected {want}",
            x.ncols()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidInput(format!("{what}: empty sequence")));
    }
    Ok(())
}

/// Selective scan over one sequence `x` (`L x d_inner`).
pub fn selective_scan(x: &Mat, p: &SsmParams, mode: Discretization) -> Result<Mat> {
    check_width(x, p.w_b.nrows(), "selective_scan")?;
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let segments: Rc<[(usize, usize)]> = vec![(0, x.nrows())].into();
    let y = selective_scan_on_tape(&mut tape, xv, &vars, segments, mode)?;
    Ok(tape.value(y).clone())
}

/// Gated block over one sequence `x` (`L x d_model`).
pub fn mamba_forward(x: &Mat, p: &SsmParams, mode: Discretization) -> Result<Mat> {
    check_width(x, p.w_in.nrows(), "mamba_forward")?;
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let segments: Rc<[(usize, usize)]> = vec![(0, x.nrows())].into();
    let y = mamba_on_tape(&mut tape, xv, &vars, segments, mode)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params(conv: Option<usize>, seed: u64) -> (SsmConfig, SsmParams) {
        let mut cfg = SsmConfig::new(3, 4);
        cfg.conv_kernel = conv;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SsmParams::init(&cfg, &mut rng);
        (cfg, p)
    }

    fn random_input(l: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_matrix(&mut rng, l, d, 1.0)
    }

    #[test]
    fn discretize_closed_form() {
        let (abar, bbar) = discretize(-1.0, 1.0, std::f64::consts::LN_2).unwrap();
        assert!((abar - 0.5).abs() < 1e-15);
        assert!((bbar - 0.5).abs() < 1e-15);
    }

    #[test]
    fn discretize_small_step_limit() {
        let (abar, bbar) = discretize(-1.0, 1.0, 1e-12).unwrap();
        assert!((abar - 1.0).abs() < 1e-11);
        assert!(bbar.abs() < 1e-11);
        assert!(discretize(-1.0, 1.0, 0.0).is_err());
        assert!(discretize(-1.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn euler_mode_drops_hold_factor() {
        let (_, bbar) = discretize_with(-2.0, 3.0, 0.25, Discretization::Euler).unwrap();
        assert_eq!(bbar, 0.75);
    }

    #[test]
    fn stable_for_negative_a() {
        let (_, p) = small_params(None, 3);
        let a = p.a();
        for &v in a.iter() {
            for dt in [1e-6, 0.01, 1.0, 50.0] {
                let abar = (dt * v).exp();
                assert!(abar < 1.0 && abar > 0.0);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (cfg, p) = small_params(None, 1);
        let x = Mat::zeros((5, cfg.d_model));
        let y = mamba_forward(&x, &p, Discretization::ZeroOrderHold).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let xs = Mat::zeros((5, cfg.d_inner()));
        let ys = selective_scan(&xs, &p, Discretization::ZeroOrderHold).unwrap();
        assert!(ys.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_scan() {
        let (cfg, p) = small_params(None, 2);
        let x = random_input(1, cfg.d_inner(), 9);
        let y = selective_scan(&x, &p, Discretization::ZeroOrderHold).unwrap();
        let b = x.dot(&p.w_b);
        let c = x.dot(&p.w_c);
        let pre = x.dot(&p.w_delta) + &p.b_delta;
        let a = p.a();
        for ch in 0..cfg.d_inner() {
            let dt = crate::autodiff::softplus(pre[[0, ch]]);
            let mut expected = 0.0;
            for k in 0..cfg.state {
                let (_, bbar) = discretize(a[[ch, k]], b[[0, k]], dt).unwrap();
                expected += c[[0, k]] * bbar * x[[0, ch]];
            }
            assert!((y[[0, ch]] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn causal_prefix_is_unchanged_by_later_tokens() {
        for conv in [None, Some(4)] {
            let (cfg, p) = small_params(conv, 5);
            let x = random_input(8, cfg.d_model, 11);
            let full = mamba_forward(&x, &p, Discretization::ZeroOrderHold).unwrap();
            let mut perturbed = x.clone();
            for t in 5..8 {
                for d in 0..cfg.d_model {
                    perturbed[[t, d]] += 10.0;
                }
            }
            let y2 = mamba_forward(&perturbed, &p, Discretization::ZeroOrderHold).unwrap();
            for t in 0..5 {
                for d in 0..cfg.d_model {
                    assert_eq!(full[[t, d]], y2[[t, d]]);
                }
            }
        }
    }

    #[test]
    fn segments_are_independent() {
        let (cfg, p) = small_params(Some(3), 8);
        let x1 = random_input(4, cfg.d_model, 1);
        let x2 = random_input(6, cfg.d_model, 2);
        let stacked = ndarray::concatenate(Axis(0), &[x1.view(), x2.view()]).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xv = tape.leaf(stacked);
        let y = mamba_on_tape(
            &mut tape,
            xv,
            &vars,
            vec![(0, 4), (4, 10)].into(),
            Discretization::ZeroOrderHold,
        )
        .unwrap();
        let y1 = mamba_forward(&x1, &p, Discretization::ZeroOrderHold).unwrap();
        let y2 = mamba_forward(&x2, &p, Discretization::ZeroOrderHold).unwrap();
        let y = tape.value(y);
        for t in 0..4 {
            for d in 0..cfg.d_model {
                assert_eq!(y[[t, d]], y1[[t, d]]);
            }
        }
        for t in 0..6 {
            for d in 0..cfg.d_model {
                assert_eq!(y[[t + 4, d]], y2[[t, d]]);
            }
        }
    }

    fn gradient_check(conv: Option<usize>, mode: Discretization) {
        let (cfg, p) = small_params(conv, 21);
        let x = random_input(6, cfg.d_model, 4);
        let w = random_input(6, cfg.d_model, 5);
        let loss = |p: &SsmParams, x: &Mat| -> f64 {
            let y = mamba_forward(x, p, mode).unwrap();
            (&y * &w).sum()
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = mamba_on_tape(&mut tape, xv, &vars, vec![(0, 6)].into(), mode).unwrap();
        let wv = tape.leaf(w.clone());
        let prod = tape.mul(y, wv);
        let out = tape.sum(prod);
        let grads = tape.backward(out);
        let h = 1e-5;
        let names: Vec<&str> = p.named().iter().map(|(n, _)| *n).collect();
        let vars_named = vars.named();
        for (name, var) in names.iter().zip(vars_named.iter().map(|(_, v)| **v)) {
            let analytic = grads.get(var).unwrap().clone();
            let base = p
                .named()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .clone();
            for idx in 0..base.len() {
                let perturb = |delta: f64| {
                    let q = p.map(|n, m| {
                        let mut m = m.clone();
                        if n == *name {
                            m.as_slice_mut().unwrap()[idx] += delta;
                        }
                        m
                    });
                    loss(&q, &x)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "{name}[{idx}]: fd {fd} analytic {an}"
                );
            }
        }
        let gx = grads.get(xv).unwrap();
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(None, Discretization::ZeroOrderHold);
    }

    #[test]
    fn gradients_match_finite_differences_with_conv_and_euler() {
        gradient_check(Some(3), Discretization::Euler);
    }

    #[test]
    fn hold_factor_derivative_is_consistent() {
        for z in [-3.0f64, -0.5, -0.02, -0.009, -1e-4, -1e-9, 1e-3, 0.4] {
            let h = 1e-6 * (1.0f64).max(z.abs());
            let fd = (hold_factor(z + h) - hold_factor(z - h)) / (2.0 * h);
            assert!((fd - hold_factor_deriv(z)).abs() < 1e-7, "z = {z}");
        }
    }
}
