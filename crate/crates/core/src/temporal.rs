//! LSTM encoder with temporal attention over a fixed gaze window.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::math::ln1p;
use crate::params::param_tree;
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Gaze samples per input window.
pub const WINDOW_LEN: usize = 10;

/// Features per timestep: x, y, confidence, ln(1 + Δt).
pub const INPUT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GazePoint {
    pub t_ms: f64,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl GazePoint {
    pub fn new(t_ms: f64, x: f64, y: f64, confidence: f64) -> Self {
        Self { t_ms, x, y, confidence }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Field-range check; `index` is used in the error.
    pub fn validate(&self, index: usize) -> Result<()> {
        let unit = [("x", self.x), ("y", self.y), ("conf", self.confidence)];
        for (field, value) in unit {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::FieldOutOfRange {
                    index,
                    field,
                    value,
                    min: 0.0,
                    max: 1.0,
                });
            }
        }
        if !(self.t_ms >= 0.0) || !self.t_ms.is_finite() {
            return Err(Error::FieldOutOfRange {
                index,
                field: "t_ms",
                value: self.t_ms,
                min: 0.0,
                max: f64::INFINITY,
            });
        }
        Ok(())
    }
}

/// Check bounds and strictly increasing timestamps.
pub fn validate_points(points: &[GazePoint]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        p.validate(i)?;
        if i > 0 && p.t_ms <= points[i - 1].t_ms {
            return Err(Error::NonMonotonicTime { index: i });
        }
    }
    Ok(())
}

/// Gate weights act on `[h_{t-1}, x_t]`, shape `[(hidden + 4) × hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T = Tensor> {
    pub w_f: T,
    pub w_i: T,
    pub w_c: T,
    pub w_o: T,
    pub b_f: T,
    pub b_i: T,
    pub b_c: T,
    pub b_o: T,
    /// Bilinear temporal-attention weight `[hidden × hidden]`.
    pub w_a: T,
}
param_tree!(LstmParams {
    leaves: [w_f, w_i, w_c, w_o, b_f, b_i, b_c, b_o, w_a]
});

impl LstmParams {
    /// Xavier weights, forget bias 1, other biases 0.
    pub fn init(hidden: usize, rng: &mut SplitMix64) -> Self {
        let fan_in = hidden + INPUT_DIM;
        Self {
            w_f: xavier_uniform(fan_in, hidden, rng),
            w_i: xavier_uniform(fan_in, hidden, rng),
            w_c: xavier_uniform(fan_in, hidden, rng),
            w_o: xavier_uniform(fan_in, hidden, rng),
            b_f: Tensor::ones(&[hidden]),
            b_i: Tensor::zeros(&[hidden]),
            b_c: Tensor::zeros(&[hidden]),
            b_o: Tensor::zeros(&[hidden]),
            w_a: xavier_uniform(hidden, hidden, rng),
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        let fan_in = hidden + INPUT_DIM;
        Self {
            w_f: Tensor::zeros(&[fan_in, hidden]),
            w_i: Tensor::zeros(&[fan_in, hidden]),
            w_c: Tensor::zeros(&[fan_in, hidden]),
            w_o: Tensor::zeros(&[fan_in, hidden]),
            b_f: Tensor::zeros(&[hidden]),
            b_i: Tensor::zeros(&[hidden]),
            b_c: Tensor::zeros(&[hidden]),
            b_o: Tensor::zeros(&[hidden]),
            w_a: Tensor::zeros(&[hidden, hidden]),
        }
    }
}

/// `[len × 4]` rows of `[x, y, confidence, ln(1 + Δt_ms)]`, with Δt = 0 for
/// the first row.
pub fn prepare_sequence(points: &[GazePoint], len: usize) -> Result<Tensor> {
    if points.len() != len {
        return Err(Error::WindowLength {
            expected: len,
            found: points.len(),
        });
    }
    validate_points(points)?;
    let mut data = Vec::with_capacity(len * INPUT_DIM);
    for (i, p) in points.iter().enumerate() {
        let dt = if i == 0 { 0.0 } else { p.t_ms - points[i - 1].t_ms };
        data.extend_from_slice(&[p.x, p.y, p.confidence, ln1p(dt)]);
    }
    Tensor::new(&[len, INPUT_DIM], data)
}

fn gate(tape: &mut Tape, input: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(input, w)?;
    tape.add(z, b)
}

/// One LSTM step on `x_t: [1 × 4]`, `h_prev, c_prev: [1 × hidden]`.
pub fn lstm_step(tape: &mut Tape, x_t: Var, h_prev: Var, c_prev: Var, p: &LstmParams<Var>) -> Result<(Var, Var)> {
    let hx = tape.concat_cols(&[h_prev, x_t])?;
    let f = gate(tape, hx, p.w_f, p.b_f)?;
    let f = tape.sigmoid(f)?;
    let i = gate(tape, hx, p.w_i, p.b_i)?;
    let i = tape.sigmoid(i)?;
    let c_tilde = gate(tape, hx, p.w_c, p.b_c)?;
    let c_tilde = tape.tanh(c_tilde)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, c_tilde)?;
    let c = tape.add(keep, write)?;
    let o = gate(tape, hx, p.w_o, p.b_o)?;
    let o = tape.sigmoid(o)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Attention pooling of `h_all: [T × hidden]` against its last row.
/// Returns the pooled `[1 × hidden]` state and the `[1 × T]` weights.
pub fn temporal_attention(tape: &mut Tape, h_all: Var, w_a: Var) -> Result<(Var, Var)> {
    let steps = tape.shape(h_all)[0];
    let last = tape.slice_rows(h_all, steps - 1, 1)?;
    let last_t = tape.transpose(last)?;
    let projected = tape.matmul(h_all, w_a)?;
    let scores = tape.matmul(projected, last_t)?;
    let scores = tape.transpose(scores)?;
    let alpha = tape.softmax(scores)?;
    Ok((tape.matmul(alpha, h_all)?, alpha))
}

#[derive(Debug, Clone)]
pub struct TemporalEncoding {
    /// `[1 × hidden]`
    pub features: Var,
    /// `[1 × T]`
    pub attention: Var,
    /// Hidden states, one `[1 × hidden]` per step.
    pub hidden: Vec<Var>,
}

/// Run the LSTM from a zero state over a prepared `[T × 4]` sequence.
pub fn encode_prepared(tape: &mut Tape, seq: &Tensor, p: &LstmParams<Var>) -> Result<TemporalEncoding> {
    let hidden_dim = tape.shape(p.b_f).iter().product();
    let seq = tape.constant(seq.clone())?;
    let steps = tape.shape(seq)[0];
    let mut h = tape.constant(Tensor::zeros(&[1, hidden_dim]))?;
    let mut c = tape.constant(Tensor::zeros(&[1, hidden_dim]))?;
    let mut hidden = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.slice_rows(seq, t, 1)?;
        (h, c) = lstm_step(tape, x_t, h, c, p)?;
        hidden.push(h);
    }
    let h_all = tape.concat_rows(&hidden)?;
    let (features, attention) = temporal_attention(tape, h_all, p.w_a)?;
    Ok(TemporalEncoding {
        features,
        attention,
        hidden,
    })
}

pub fn encode_sequence(tape: &mut Tape, points: &[GazePoint], p: &LstmParams<Var>) -> Result<TemporalEncoding> {
    let seq = prepare_sequence(points, WINDOW_LEN)?;
    encode_prepared(tape, &seq, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, Coordinates};
    use crate::params::{bind, ParamTree};
    use crate::tensor::sigmoid_scalar;
    use proptest::prelude::*;

    fn window(spacing: f64, start: f64) -> Vec<GazePoint> {
        (0..WINDOW_LEN)
            .map(|i| {
                let f = i as f64 / 10.0;
                GazePoint::new(start + spacing * i as f64, 0.2 + 0.5 * f, 0.7 - 0.3 * f, 0.9)
            })
            .collect()
    }

    #[test]
    fn sequence_features() {
        let pts = window(16.6, 0.0);
        let seq = prepare_sequence(&pts, WINDOW_LEN).unwrap();
        assert_eq!(seq.shape(), &[10, 4]);
        assert_eq!(seq.at(0, 3), 0.0);
        for t in 1..10 {
            assert!((seq.at(t, 3) - 17.6f64.ln()).abs() < 1e-12);
            assert!((seq.at(t, 3) - 2.868).abs() < 1e-3);
        }
        let e = core::f64::consts::E;
        let pts = [GazePoint::new(0.0, 0.5, 0.5, 1.0), GazePoint::new(e - 1.0, 0.5, 0.5, 1.0)];
        let seq = prepare_sequence(&pts, 2).unwrap();
        assert!((seq.at(1, 3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sequence_errors() {
        let pts = window(20.0, 0.0);
        assert!(matches!(
            prepare_sequence(&pts[..9], WINDOW_LEN),
            Err(Error::WindowLength { expected: 10, found: 9 })
        ));
        let mut bad = pts.clone();
        bad[4].t_ms = bad[3].t_ms;
        assert!(matches!(prepare_sequence(&bad, WINDOW_LEN), Err(Error::NonMonotonicTime { index: 4 })));
        let mut bad = pts.clone();
        bad[2].x = 1.5;
        assert!(matches!(
            prepare_sequence(&bad, WINDOW_LEN),
            Err(Error::FieldOutOfRange { field: "x", index: 2, .. })
        ));
    }

    #[test]
    fn zero_params_give_zero_state() {
        let params = LstmParams::zeros(6);
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape).unwrap();
        let enc = encode_sequence(&mut tape, &window(30.0, 0.0), &b).unwrap();
        for h in &enc.hidden {
            assert!(tape.value(*h).data().iter().all(|&v| v == 0.0));
        }
        assert!(tape.value(enc.features).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(enc.features), &[1, 6]);
    }

    #[test]
    fn saturated_forget_gate_preserves_memory() {
        let mut params = LstmParams::zeros(3);
        params.b_f = Tensor::full(&[3], 100.0);
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape).unwrap();
        let x = tape.constant(Tensor::row(&[0.3, 0.6, 0.9, 1.0])).unwrap();
        let h0 = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let c0 = tape.constant(Tensor::row(&[0.5, -0.25, 2.0])).unwrap();
        let (_, c1) = lstm_step(&mut tape, x, h0, c0, &b).unwrap();
        for (a, e) in tape.value(c1).data().iter().zip([0.5, -0.25, 2.0]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    /// Gate-by-gate scalar re-implementation of one LSTM step.
    fn oracle_step(x: &[f64], h: &[f64], c: &[f64], p: &LstmParams) -> (Vec<f64>, Vec<f64>) {
        let hx: Vec<f64> = h.iter().chain(x).copied().collect();
        let hd = h.len();
        let affine = |w: &Tensor, b: &Tensor, j: usize| -> f64 {
            hx.iter().enumerate().map(|(k, v)| v * w.at(k, j)).sum::<f64>() + b.data()[j]
        };
        let mut h_out = Vec::new();
        let mut c_out = Vec::new();
        for j in 0..hd {
            let f = sigmoid_scalar(affine(&p.w_f, &p.b_f, j));
            let i = sigmoid_scalar(affine(&p.w_i, &p.b_i, j));
            let ct = affine(&p.w_c, &p.b_c, j).tanh();
            let cn = f * c[j] + i * ct;
            let o = sigmoid_scalar(affine(&p.w_o, &p.b_o, j));
            c_out.push(cn);
            h_out.push(o * cn.tanh());
        }
        (h_out, c_out)
    }

    #[test]
    fn step_matches_oracle() {
        let mut rng = SplitMix64::new(31);
        let mut params = LstmParams::init(4, &mut rng);
        params.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = rng.normal()));
        let x = [0.1, 0.8, 0.95, 2.3];
        let h: Vec<f64> = (0..4).map(|_| rng.uniform(-0.9, 0.9)).collect();
        let c: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape).unwrap();
        let vx = tape.constant(Tensor::row(&x)).unwrap();
        let vh = tape.constant(Tensor::row(&h)).unwrap();
        let vc = tape.constant(Tensor::row(&c)).unwrap();
        let (h1, c1) = lstm_step(&mut tape, vx, vh, vc, &b).unwrap();
        let (eh, ec) = oracle_step(&x, &h, &c, &params);
        for (a, e) in tape.value(h1).data().iter().zip(&eh) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in tape.value(c1).data().iter().zip(&ec) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_trivial_cases() {
        let mut rng = SplitMix64::new(5);
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(&[3, 3], (0..9).map(|_| rng.normal()).collect()).unwrap()).unwrap();
        let one = tape.constant(Tensor::row(&[0.1, -0.2, 0.3])).unwrap();
        let (out, alpha) = temporal_attention(&mut tape, one, w).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        assert_eq!(tape.value(out).data(), &[0.1, -0.2, 0.3]);

        let same = tape.constant(Tensor::from_rows(&[&[0.4, 0.5, -0.1][..]; 4]).unwrap()).unwrap();
        let (out, alpha) = temporal_attention(&mut tape, same, w).unwrap();
        assert!(tape.value(alpha).data().iter().all(|a| (a - 0.25).abs() < 1e-15));
        for (a, e) in tape.value(out).data().iter().zip([0.4, 0.5, -0.1]) {
            assert!((a - e).abs() < 1e-15);
        }

        let zero = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        let varied = tape.constant(Tensor::new(&[5, 3], (0..15).map(|_| rng.normal()).collect()).unwrap()).unwrap();
        let (_, alpha) = temporal_attention(&mut tape, varied, zero).unwrap();
        assert!(tape.value(alpha).data().iter().all(|a| (a - 0.2).abs() < 1e-15));
    }

    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(17);
        let params = LstmParams::init(16, &mut rng);
        let seq = prepare_sequence(&window(25.0, 100.0), WINDOW_LEN).unwrap();
        let mut inputs = Vec::new();
        params.visit("", &mut |_, t| inputs.push(t.clone()));
        let reports = grad_check_many(
            |tape, v| {
                let p = LstmParams {
                    w_f: v[0],
                    w_i: v[1],
                    w_c: v[2],
                    w_o: v[3],
                    b_f: v[4],
                    b_i: v[5],
                    b_c: v[6],
                    b_o: v[7],
                    w_a: v[8],
                };
                let enc = encode_prepared(tape, &seq, &p)?;
                let sq = tape.mul(enc.features, enc.features)?;
                let s = tape.sum(sq)?;
                tape.affine(s, 1.0, 0.0)
            },
            &inputs,
            1e-5,
            Coordinates::Sample { per_input: 40, seed: 3 },
        )
        .unwrap();
        for r in reports {
            assert!(r.max_relative_error <= 1e-4, "{r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn encoding_invariants(seed in 0u64..1000, shift in 0.0f64..10_000.0) {
            let mut rng = SplitMix64::new(seed);
            let params = LstmParams::init(8, &mut rng);
            let mut pts = Vec::new();
            let mut t = 0.0;
            for _ in 0..WINDOW_LEN {
                t += rng.uniform(1.0, 400.0);
                pts.push(GazePoint::new(t, rng.next_f64(), rng.next_f64(), rng.next_f64()));
            }
            let run = |pts: &[GazePoint]| {
                let mut tape = Tape::new();
                let b = bind(&params, &mut tape).unwrap();
                let enc = encode_sequence(&mut tape, pts, &b).unwrap();
                let alpha = tape.value(enc.attention).data().to_vec();
                let hs: Vec<f64> = enc.hidden.iter().flat_map(|h| tape.value(*h).data().to_vec()).collect();
                (tape.value(enc.features).data().to_vec(), alpha, hs)
            };
            let (f, alpha, hs) = run(&pts);
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(alpha.iter().all(|a| *a > 0.0 && *a < 1.0));
            prop_assert!(hs.iter().all(|h| h.abs() < 1.0));
            let shifted: Vec<GazePoint> = pts.iter().map(|p| GazePoint { t_ms: p.t_ms + shift, ..*p }).collect();
            let (g, _, _) = run(&shifted);
            for (a, b) in f.iter().zip(&g) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
