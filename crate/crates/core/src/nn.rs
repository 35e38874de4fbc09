//! Dense networks, the Adam optimizer and the binary weight container.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Algebra, Tape, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has length {got}, network expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("layer dims do not chain: layer {index} expects {expected} inputs, previous layer emits {got}")]
    BrokenChain { index: usize, expected: usize, got: usize },
    #[error("an MLP needs at least one layer")]
    Empty,
    #[error("weight container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// Layer shapes `(in, out)`; the activation follows every layer but the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<(usize, usize)>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<(usize, usize)>, activation: Activation) -> Result<Self, NnError> {
        if layer_dims.is_empty() {
            return Err(NnError::Empty);
        }
        for (i, pair) in layer_dims.windows(2).enumerate() {
            if pair[0].1 != pair[1].0 {
                return Err(NnError::BrokenChain {
                    index: i + 1,
                    expected: pair[1].0,
                    got: pair[0].1,
                });
            }
        }
        Ok(Self {
            layer_dims,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1].1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Weights `w` are row-major `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<LayerParams>,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .layer_dims
            .iter()
            .map(|&(i, o)| LayerParams {
                w: vec![0.0; i * o],
                b: vec![0.0; o],
            })
            .collect();
        Self { spec, layers }
    }

    /// Uniform `±sqrt(6/(in+out))` weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let layers = spec
            .layer_dims
            .iter()
            .map(|&(i, o)| {
                let a = (6.0 / (i + o) as f64).sqrt();
                LayerParams {
                    w: (0..i * o).map(|_| rng.random_range(-a..a)).collect(),
                    b: vec![0.0; o],
                }
            })
            .collect();
        Self { spec, layers }
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Flat view in declaration order: `w₀, b₀, w₁, b₁, …`.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
    }

    /// Reads `param_count()` values from the front of `src`, returns the rest.
    pub fn load_flat<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let mut rest = src;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.w.len());
            l.w.copy_from_slice(w);
            let (b, r) = r.split_at(l.b.len());
            l.b.copy_from_slice(b);
            rest = r;
        }
        rest
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.spec.input_dim() {
            return Err(NnError::DimMismatch {
                expected: self.spec.input_dim(),
                got: input.len(),
            });
        }
        let mut alg = crate::autodiff::Plain;
        let bound = BoundMlp::bind_plain(self);
        Ok(bound.forward(&mut alg, &input.to_vec()))
    }
}

/// An [`Mlp`] whose weights live in a particular [`Algebra`].
#[derive(Debug, Clone)]
pub struct BoundMlp<V> {
    pub spec: MlpSpec,
    pub layers: Vec<(V, V)>,
}

impl BoundMlp<Vec<f64>> {
    pub fn bind_plain(mlp: &Mlp) -> Self {
        Self {
            spec: mlp.spec.clone(),
            layers: mlp.layers.iter().map(|l| (l.w.clone(), l.b.clone())).collect(),
        }
    }
}

impl BoundMlp<Var> {
    /// Registers every weight and bias as a differentiable tape leaf.
    pub fn bind_tape(mlp: &Mlp, tape: &mut Tape) -> Self {
        Self {
            spec: mlp.spec.clone(),
            layers: mlp
                .layers
                .iter()
                .map(|l| (tape.leaf(&l.w), tape.leaf(&l.b)))
                .collect(),
        }
    }

    /// Gradients laid out like [`Mlp::flatten_into`].
    pub fn collect_grads(&self, grads: &crate::autodiff::Gradients, out: &mut Vec<f64>) {
        for (w, b) in &self.layers {
            out.extend_from_slice(grads.wrt(*w));
            out.extend_from_slice(grads.wrt(*b));
        }
    }
}

impl<V: Clone> BoundMlp<V> {
    pub fn forward<A: Algebra<Vector = V>>(&self, alg: &mut A, input: &V) -> V {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, ((w, b), &(inp, out))) in self.layers.iter().zip(&self.spec.layer_dims).enumerate() {
            h = alg.vec_affine(w, b, &h, out, inp);
            if i != last {
                h = match self.spec.activation {
                    Activation::Tanh => alg.vec_tanh(&h),
                    Activation::Relu => alg.vec_relu(&h),
                };
            }
        }
        h
    }

    /// Output value and `∂(seedᵀ·out)/∂input`, the reverse sweep written out
    /// in differentiable primitives so it can itself be taped.
    pub fn forward_with_input_grad<A: Algebra<Vector = V>>(
        &self,
        alg: &mut A,
        input: &V,
        seed: &V,
    ) -> (V, V) {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        // derivative of each hidden activation w.r.t. its pre-activation
        let mut slopes = Vec::with_capacity(last);
        for (i, ((w, b), &(inp, out))) in self.layers.iter().zip(&self.spec.layer_dims).enumerate() {
            let z = alg.vec_affine(w, b, &h, out, inp);
            if i != last {
                h = match self.spec.activation {
                    Activation::Tanh => {
                        let a = alg.vec_tanh(&z);
                        slopes.push(alg.vec_one_minus_sq(&a));
                        a
                    }
                    Activation::Relu => {
                        slopes.push(alg.vec_step_mask(&z));
                        alg.vec_relu(&z)
                    }
                };
            } else {
                h = z;
            }
        }
        let mut g = seed.clone();
        for i in (0..=last).rev() {
            let (w, _) = &self.layers[i];
            let (inp, out) = self.spec.layer_dims[i];
            g = alg.vec_mat_tvec(w, &g, out, inp);
            if i > 0 {
                g = alg.vec_mul(&g, &slopes[i - 1]);
            }
        }
        (h, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
    }
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

pub const CONTAINER_MAGIC: &[u8; 8] = b"PHYSORD1";

/// SHA-256 of a descriptor's canonical JSON.
pub fn spec_digest<T: Serialize>(descriptor: &T) -> [u8; 32] {
    let json = serde_json::to_vec(descriptor).expect("descriptor serializes");
    Sha256::digest(&json).into()
}

/// Writes the binary weight container:
/// `PHYSORD1` · 32-byte digest · u32 array count · per array (u64 length, f64 LE values).
pub fn write_container<W: Write>(
    mut out: W,
    digest: &[u8; 32],
    arrays: &[&[f64]],
) -> Result<(), NnError> {
    out.write_all(CONTAINER_MAGIC)?;
    out.write_all(digest)?;
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        out.write_all(&(a.len() as u64).to_le_bytes())?;
        for v in a.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a container written by [`write_container`], returning its digest and arrays.
pub fn read_container<R: Read>(mut input: R) -> Result<([u8; 32], Vec<Vec<f64>>), NnError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(NnError::Container("bad magic".into()));
    }
    let mut digest = [0u8; 32];
    input.read_exact(&mut digest)?;
    let mut n4 = [0u8; 4];
    input.read_exact(&mut n4)?;
    let count = u32::from_le_bytes(n4) as usize;
    let mut arrays = Vec::with_capacity(count);
    let mut b8 = [0u8; 8];
    for _ in 0..count {
        input.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > (1 << 32) {
            return Err(NnError::Container(format!("implausible array length {len}")));
        }
        let mut a = Vec::with_capacity(len);
        for _ in 0..len {
            input.read_exact(&mut b8)?;
            a.push(f64::from_le_bytes(b8));
        }
        arrays.push(a);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(NnError::Container("trailing bytes after last array".into()));
    }
    Ok((digest, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Plain;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rng() -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(42)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![(13, 64), (64, 64), (64, 6)], Activation::Tanh).unwrap();
        let net = Mlp::zeros(spec);
        let y = net.forward(&[0.7; 13]).unwrap();
        assert_eq!(y, vec![0.0; 6]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let spec = MlpSpec::new(vec![(3, 3)], Activation::Tanh).unwrap();
        let mut net = Mlp::zeros(spec);
        net.layers[0].w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(net.forward(&[1.5, -2.0, 3.0]).unwrap(), vec![1.5, -2.0, 3.0]);
    }

    #[test]
    fn force_net_parameter_count() {
        let spec = MlpSpec::new(vec![(13, 64), (64, 64), (64, 6)], Activation::Tanh).unwrap();
        assert_eq!(spec.param_count(), 13 * 64 + 64 + 64 * 64 + 64 + 64 * 6 + 6);
        assert_eq!(spec.param_count(), 5446);
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(MlpSpec::new(vec![], Activation::Tanh), Err(NnError::Empty)));
        assert!(matches!(
            MlpSpec::new(vec![(3, 4), (5, 2)], Activation::Tanh),
            Err(NnError::BrokenChain { index: 1, expected: 5, got: 4 })
        ));
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let spec = MlpSpec::new(vec![(4, 2)], Activation::Relu).unwrap();
        let net = Mlp::zeros(spec);
        assert!(matches!(
            net.forward(&[1.0; 3]),
            Err(NnError::DimMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn identity_net_input_gradient_equals_seed() {
        let spec = MlpSpec::new(vec![(3, 3)], Activation::Tanh).unwrap();
        let mut net = Mlp::zeros(spec);
        net.layers[0].w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let bound = BoundMlp::bind_tape(&net, &mut tape);
        let x = tape.leaf(&[0.1, 0.2, 0.3]);
        let y = bound.forward(&mut tape, &x);
        let seed = [0.5, -1.0, 2.0];
        let g = tape.backward(y, &seed).unwrap();
        assert_eq!(g.wrt(x), &seed);
    }

    fn check_weight_gradients(activation: Activation) {
        let spec = MlpSpec::new(vec![(5, 7), (7, 6), (6, 3)], activation).unwrap();
        let mut r = rng();
        let mut net = Mlp::init(spec, &mut r);
        // nonzero biases so relu kinks are not hit at exactly zero
        for l in &mut net.layers {
            l.b.iter_mut().for_each(|b| *b = r.random_range(-0.3..0.3));
        }
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let seed = vec![0.3, -0.7, 1.1];
        let loss = |n: &Mlp| -> f64 {
            let y = n.forward(&x).unwrap();
            y.iter().zip(&seed).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = Tape::new();
        let bound = BoundMlp::bind_tape(&net, &mut tape);
        let xi = tape.constant(&x);
        let y = bound.forward(&mut tape, &xi);
        let g = tape.backward(y, &seed).unwrap();
        let mut analytic = Vec::new();
        bound.collect_grads(&g, &mut analytic);

        let mut flat = Vec::new();
        net.flatten_into(&mut flat);
        let h = 1e-6;
        // central differences carry ~1e-10 absolute roundoff; floor the
        // denominator at a small fraction of the largest gradient entry
        let gmax = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let mut np = net.clone();
            np.load_flat(&p);
            p[i] -= 2.0 * h;
            let mut nm = net.clone();
            nm.load_flat(&p);
            let fd = (loss(&np) - loss(&nm)) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3 * gmax);
            assert!(rel <= 1e-6, "param {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences_tanh() {
        check_weight_gradients(Activation::Tanh);
    }

    #[test]
    fn weight_gradients_match_finite_differences_relu() {
        check_weight_gradients(Activation::Relu);
    }

    #[test]
    fn symbolic_input_gradient_matches_tape_gradient() {
        let spec = MlpSpec::new(vec![(12, 10), (10, 1)], Activation::Tanh).unwrap();
        let net = Mlp::init(spec, &mut rng());
        let x: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.5).collect();
        let (_, g) = BoundMlp::bind_plain(&net).forward_with_input_grad(&mut Plain, &x, &vec![1.0]);
        let mut tape = Tape::new();
        let b = BoundMlp::bind_tape(&net, &mut tape);
        let xv = tape.leaf(&x);
        let y = b.forward(&mut tape, &xv);
        let tg = tape.backward(y, &[1.0]).unwrap();
        for (a, b) in g.iter().zip(tg.wrt(xv)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_zero_grad_keeps_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.0, 0.0];
        let cfg = AdamConfig::default();
        let before_m = st.m.clone();
        // v stays 0 and m decays: the update is −lr·m̂/ε, so use zero m as well
        st.m = vec![0.0, 0.0];
        adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.m, vec![0.0, 0.0]);
        let mut st2 = AdamState::new(2);
        st2.m = before_m;
        st2.v = vec![1.0, 1.0];
        st2.t = 5;
        let mut p2 = p.clone();
        adam_step(&mut p2, &[0.0, 0.0], &mut st2, &cfg);
        assert_eq!(st2.m, vec![0.45, 0.45]);
        assert!((st2.v[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0, 0.0, 0.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[2.5, -0.01, 40.0], &mut st, &cfg);
        for (pi, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((pi - s * cfg.lr).abs() < 1e-6 * cfg.lr + 1e-9);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut w = vec![0.0];
        let mut st = AdamState::new(1);
        for _ in 0..200 {
            let g = 2.0 * (w[0] - 3.0);
            adam_step(&mut w, &[g], &mut st, &cfg);
        }
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![30.0, 40.0];
        let n = clip_global_norm(&mut g, 10.0);
        assert_eq!(n, 50.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let spec = MlpSpec::new(vec![(13, 64), (64, 64), (64, 6)], Activation::Tanh).unwrap();
        let net = Mlp::init(spec.clone(), &mut rng());
        let digest = spec_digest(&spec);
        let arrays: Vec<&[f64]> = net
            .layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect();
        let mut buf = Vec::new();
        write_container(&mut buf, &digest, &arrays).unwrap();
        assert_eq!(&buf[..8], b"PHYSORD1");
        let (d, back) = read_container(buf.as_slice()).unwrap();
        assert_eq!(d, digest);
        for (a, b) in arrays.iter().zip(&back) {
            assert_eq!(a.len(), b.len());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        write_container(&mut again, &d, &back.iter().map(|v| v.as_slice()).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn container_rejects_bad_magic_and_trailing_bytes() {
        let mut buf = Vec::new();
        write_container(&mut buf, &[0; 32], &[&[1.0]]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_container(bad.as_slice()).is_err());
        buf.push(0);
        assert!(read_container(buf.as_slice()).is_err());
    }
}
