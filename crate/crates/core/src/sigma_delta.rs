//! Delta encoding and sigma decoding of temporally redundant signals.
//!
//! A delta encoder keeps a per-element reference `x_ref` and emits the change
//! `x - x_ref` as a graded event whenever its magnitude reaches the threshold;
//! the reference then snaps to the input (algebraically the same as adding the
//! emitted message, but exact in floating point). A sigma decoder accumulates
//! received events into a running estimate. Wrapping a layer's weighted sum
//! and activation between a sigma and a delta stage yields an event-driven
//! layer whose accumulated state reconstructs the dense computation.

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// Element types a sigma-delta stage can carry.
pub trait Signal: Copy + Default + PartialEq + std::fmt::Debug + 'static {
    /// |delta| >= threshold, computed without intermediate overflow.
    fn reaches(delta: Self, threshold: Self) -> bool;
    fn sub(self, rhs: Self) -> Self;
    fn checked_accumulate(self, rhs: Self) -> Option<Self>;
    /// Thresholds must be finite and nonnegative.
    fn valid_threshold(threshold: Self) -> bool;
}

impl Signal for f32 {
    fn reaches(delta: Self, threshold: Self) -> bool {
        delta.abs() >= threshold
    }
    fn sub(self, rhs: Self) -> Self {
        self - rhs
    }
    fn checked_accumulate(self, rhs: Self) -> Option<Self> {
        Some(self + rhs)
    }
    fn valid_threshold(threshold: Self) -> bool {
        threshold.is_finite() && threshold >= 0.0
    }
}

impl Signal for i32 {
    fn reaches(delta: Self, threshold: Self) -> bool {
        (delta as i64).abs() >= threshold as i64
    }
    fn sub(self, rhs: Self) -> Self {
        self - rhs
    }
    fn checked_accumulate(self, rhs: Self) -> Option<Self> {
        self.checked_add(rhs)
    }
    fn valid_threshold(threshold: Self) -> bool {
        threshold >= 0
    }
}

/// Dense frame of graded events; zero means "no event at this element".
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrame<T> {
    values: Tensor<T>,
    nonzero_count: usize,
}

impl<T: Signal> EventFrame<T> {
    pub fn from_tensor(values: Tensor<T>) -> Self {
        let nonzero_count = values.count_nonzero();
        EventFrame { values, nonzero_count }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        EventFrame {
            values: Tensor::zeros(shape),
            nonzero_count: 0,
        }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn nonzero_count(&self) -> usize {
        self.nonzero_count
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// Sender-side state: reference memory plus spike threshold.
#[derive(Clone, Debug)]
pub struct DeltaState<T> {
    reference: Tensor<T>,
    threshold: T,
}

impl<T: Signal> DeltaState<T> {
    pub fn new(shape: &[usize], threshold: T) -> Result<Self> {
        if !T::valid_threshold(threshold) {
            return Err(Error::Config(format!(
                "delta threshold must be nonnegative, got {threshold:?}"
            )));
        }
        Ok(DeltaState {
            reference: Tensor::zeros(shape),
            threshold,
        })
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn reference(&self) -> &Tensor<T> {
        &self.reference
    }

    /// Encode one frame: emit `x - x_ref` wherever the change reaches the
    /// threshold (boundary inclusive), snapping the reference to the input at
    /// spiking elements. After this call `|x - x_ref| < threshold` holds
    /// elementwise (exact equality in the threshold-zero mode).
    pub fn encode(&mut self, x: &Tensor<T>) -> Result<EventFrame<T>> {
        same_shape("delta_encode", x, &self.reference)?;
        let mut events = Tensor::zeros(x.shape());
        let mut nonzero = 0usize;
        let out = events.data_mut();
        let refs = self.reference.data_mut();
        for (i, (&xv, r)) in x.data().iter().zip(refs.iter_mut()).enumerate() {
            let delta = xv.sub(*r);
            if T::reaches(delta, self.threshold) {
                out[i] = delta;
                *r = xv;
                if delta != T::default() {
                    nonzero += 1;
                }
            }
        }
        Ok(EventFrame {
            values: events,
            nonzero_count: nonzero,
        })
    }

    pub fn reset(&mut self) {
        self.reference = Tensor::zeros(self.reference.shape());
    }
}

/// Receiver-side state: running sum of everything received since reset.
#[derive(Clone, Debug)]
pub struct SigmaState<T> {
    estimate: Tensor<T>,
}

impl<T: Signal> SigmaState<T> {
    pub fn new(shape: &[usize]) -> Self {
        SigmaState {
            estimate: Tensor::zeros(shape),
        }
    }

    pub fn estimate(&self) -> &Tensor<T> {
        &self.estimate
    }

    /// Accumulate a dense contribution into the estimate.
    pub fn accumulate(&mut self, values: &Tensor<T>) -> Result<&Tensor<T>> {
        same_shape("sigma_decode", values, &self.estimate)?;
        for (e, &v) in self.estimate.data_mut().iter_mut().zip(values.data()) {
            *e = e.checked_accumulate(v).ok_or_else(|| {
                Error::Overflow("sigma accumulator left the i32 range".into())
            })?;
        }
        Ok(&self.estimate)
    }

    /// Accumulate an event frame and return the updated estimate.
    pub fn decode(&mut self, events: &EventFrame<T>) -> Result<&Tensor<T>> {
        self.accumulate(events.values())
    }

    pub fn reset(&mut self) {
        self.estimate = Tensor::zeros(self.estimate.shape());
    }
}

/// The dense computation a sigma-delta pair is wrapped around: a linear map
/// (weighted sum without bias) plus a bias/activation stage, with synop
/// accounting for sparse inputs.
pub trait DenseTransform<T: Signal> {
    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];
    /// Weighted sum of the inputs, no bias. Linearity in the input is what
    /// lets the sigma stage reconstruct the dense result from deltas.
    fn linear(&self, input: &Tensor<T>) -> Result<Tensor<T>>;
    /// Bias plus nonlinearity, applied to the reconstructed weighted sum.
    fn bias_activation(&self, pre: &Tensor<T>) -> Result<Tensor<T>>;
    /// Synaptic operations triggered by the nonzero elements of `events`:
    /// the sum of each event's fan-out through the weights.
    fn synops(&self, events: &EventFrame<T>) -> u64;
}

/// Per-frame event accounting of one wrapped layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerFrameStats {
    pub events_in: u64,
    pub events_out: u64,
    pub synops: u64,
}

/// A layer wrapped between a sigma (input) and a delta (output) stage.
pub struct SigmaDeltaLayer<T: Signal, D: DenseTransform<T>> {
    transform: D,
    sigma: SigmaState<T>,
    delta: DeltaState<T>,
}

impl<T: Signal, D: DenseTransform<T>> SigmaDeltaLayer<T, D> {
    pub fn new(transform: D, threshold: T) -> Result<Self> {
        let out_shape = transform.output_shape().to_vec();
        Ok(SigmaDeltaLayer {
            sigma: SigmaState::new(&out_shape),
            delta: DeltaState::new(&out_shape, threshold)?,
            transform,
        })
    }

    pub fn transform(&self) -> &D {
        &self.transform
    }

    /// Consume the incoming events, update the weighted-sum estimate, apply
    /// bias and activation, and delta-encode the activation output.
    pub fn step(&mut self, events: &EventFrame<T>) -> Result<(EventFrame<T>, LayerFrameStats)> {
        if events.shape() != self.transform.input_shape() {
            return Err(Error::ShapeMismatch(format!(
                "layer expects input {:?}, got {:?}",
                self.transform.input_shape(),
                events.shape()
            )));
        }
        let synops = self.transform.synops(events);
        let contribution = self.transform.linear(events.values())?;
        self.sigma.accumulate(&contribution)?;
        let activated = self.transform.bias_activation(self.sigma.estimate())?;
        let out = self.delta.encode(&activated)?;
        let stats = LayerFrameStats {
            events_in: events.nonzero_count() as u64,
            events_out: out.nonzero_count() as u64,
            synops,
        };
        Ok((out, stats))
    }

    pub fn reset(&mut self) {
        self.sigma.reset();
        self.delta.reset();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn encode_stream_matches_hand_trace() {
        // threshold 1, stream [5, 5.4, 7] -> events [5, 0, 2], ref ends at 7.
        let mut state = DeltaState::new(&[1], 1.0f32).unwrap();
        let xs = [5.0f32, 5.4, 7.0];
        let expect = [5.0f32, 0.0, 2.0];
        for (x, e) in xs.iter().zip(expect) {
            let frame = Tensor::from_vec(&[1], vec![*x]).unwrap();
            let ev = state.encode(&frame).unwrap();
            assert_eq!(ev.values().data()[0], e);
        }
        // 5.4 never spiked, so the reference tracks the last spike at 5 then 7.
        assert_eq!(state.reference().data()[0], 7.0);
    }

    #[test]
    fn zero_threshold_is_pure_temporal_difference() {
        let mut state = DeltaState::new(&[4], 0i32).unwrap();
        let mut prev = vec![0i32; 4];
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let x: Vec<i32> = (0..4).map(|_| rng.int_in(-50, 50) as i32).collect();
            let ev = state
                .encode(&Tensor::from_vec(&[4], x.clone()).unwrap())
                .unwrap();
            for i in 0..4 {
                assert_eq!(ev.values().data()[i], x[i] - prev[i]);
            }
            prev = x;
        }
    }

    #[test]
    fn constant_stream_goes_silent_after_first_frame() {
        let mut state = DeltaState::new(&[8], 0.25f32).unwrap();
        let frame = Tensor::from_vec(&[8], (0..8).map(|v| v as f32).collect()).unwrap();
        let first = state.encode(&frame).unwrap();
        assert_eq!(first.nonzero_count(), 7); // element 0 is zero-valued
        for _ in 0..5 {
            let ev = state.encode(&frame).unwrap();
            assert_eq!(ev.nonzero_count(), 0);
        }
    }

    #[test]
    fn boundary_change_spikes() {
        let mut state = DeltaState::new(&[1], 2.0f32).unwrap();
        let ev = state.encode(&Tensor::from_vec(&[1], vec![2.0]).unwrap()).unwrap();
        assert_eq!(ev.nonzero_count(), 1);
    }

    #[test]
    fn decode_accumulates_event_stream() {
        let mut sigma = SigmaState::new(&[1]);
        let trace = [5.0f32, 5.0, 7.0];
        for (ev, want) in [5.0f32, 0.0, 2.0].iter().zip(trace) {
            let frame = EventFrame::from_tensor(Tensor::from_vec(&[1], vec![*ev]).unwrap());
            let est = sigma.decode(&frame).unwrap();
            assert_eq!(est.data()[0], want);
        }
    }

    #[test]
    fn decode_of_zero_events_is_a_no_op() {
        let mut sigma = SigmaState::new(&[3]);
        sigma
            .accumulate(&Tensor::from_vec(&[3], vec![1.0f32, -2.0, 3.0]).unwrap())
            .unwrap();
        let before = sigma.estimate().clone();
        sigma.decode(&EventFrame::zeros(&[3])).unwrap();
        assert_eq!(sigma.estimate(), &before);
    }

    #[test]
    fn lossless_encode_decode_round_trip() {
        // Integer-valued signals telescope exactly at threshold zero.
        let mut enc = DeltaState::new(&[16], 0i32).unwrap();
        let mut dec = SigmaState::new(&[16]);
        let mut rng = Rng::new(77);
        for _ in 0..30 {
            let x: Vec<i32> = (0..16).map(|_| rng.int_in(-100, 100) as i32).collect();
            let xt = Tensor::from_vec(&[16], x).unwrap();
            let ev = enc.encode(&xt).unwrap();
            let est = dec.decode(&ev).unwrap();
            assert_eq!(est, &xt);
        }
    }

    #[test]
    fn reset_makes_next_frame_fully_transmitted() {
        let mut enc = DeltaState::new(&[4], 0.5f32).unwrap();
        let a = Tensor::from_vec(&[4], vec![1.0f32, 0.0, -2.0, 3.0]).unwrap();
        enc.encode(&a).unwrap();
        enc.encode(&a).unwrap();
        enc.reset();
        let ev = enc.encode(&a).unwrap();
        assert_eq!(ev.values(), &a);
        assert_eq!(ev.nonzero_count(), 3);
    }

    #[test]
    fn identical_sequences_after_reset_produce_identical_events() {
        let mut enc = DeltaState::new(&[6], 1.5f32).unwrap();
        let mut rng = Rng::new(4);
        let frames: Vec<Tensor<f32>> = (0..8)
            .map(|_| Tensor::from_vec(&[6], (0..6).map(|_| rng.uniform_in(-5.0, 5.0) as f32).collect()).unwrap())
            .collect();
        let run = |enc: &mut DeltaState<f32>| -> Vec<EventFrame<f32>> {
            enc.reset();
            frames.iter().map(|f| enc.encode(f).unwrap()).collect()
        };
        let first = run(&mut enc);
        let second = run(&mut enc);
        assert_eq!(first, second);
    }

    // -- wrapped layer ------------------------------------------------------

    /// Toy fully-connected transform used to exercise the wrapper.
    struct ToyLinear {
        weight: Vec<Vec<f32>>, // [out][in]
        bias: Vec<f32>,
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        relu: bool,
    }

    impl DenseTransform<f32> for ToyLinear {
        fn input_shape(&self) -> &[usize] {
            &self.in_shape
        }
        fn output_shape(&self) -> &[usize] {
            &self.out_shape
        }
        fn linear(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
            let mut out = vec![0f32; self.weight.len()];
            for (o, row) in self.weight.iter().enumerate() {
                for (i, w) in row.iter().enumerate() {
                    out[o] += w * input.data()[i];
                }
            }
            Tensor::from_vec(&self.out_shape, out)
        }
        fn bias_activation(&self, pre: &Tensor<f32>) -> Result<Tensor<f32>> {
            let mut out = pre.clone();
            for (v, b) in out.data_mut().iter_mut().zip(&self.bias) {
                *v += b;
                if self.relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
        fn synops(&self, events: &EventFrame<f32>) -> u64 {
            events.nonzero_count() as u64 * self.weight.len() as u64
        }
    }

    fn toy_layer(relu: bool) -> ToyLinear {
        ToyLinear {
            weight: vec![vec![1.0, -2.0, 0.5], vec![0.0, 1.0, 1.0]],
            bias: vec![0.1, -0.2],
            in_shape: vec![3],
            out_shape: vec![2],
            relu,
        }
    }

    #[test]
    fn wrapped_layer_with_zero_threshold_matches_dense_forward() {
        let mut layer = SigmaDeltaLayer::new(toy_layer(true), 0.0f32).unwrap();
        let mut enc = DeltaState::new(&[3], 0.0f32).unwrap();
        let mut rng = Rng::new(12);
        let mut sigma_out = SigmaState::new(&[2]);
        for _ in 0..10 {
            let x = Tensor::from_vec(&[3], (0..3).map(|_| rng.int_in(-8, 8) as f32).collect()).unwrap();
            let events = enc.encode(&x).unwrap();
            let (out_events, _) = layer.step(&events).unwrap();
            let estimate = sigma_out.decode(&out_events).unwrap();

            let dense = layer.transform().bias_activation(&layer.transform().linear(&x).unwrap()).unwrap();
            for (a, b) in estimate.data().iter().zip(dense.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_event_synops_equal_fan_out() {
        let mut layer = SigmaDeltaLayer::new(toy_layer(false), 0.0f32).unwrap();
        let mut ev = Tensor::zeros(&[3]);
        ev.data_mut()[1] = 4.0;
        let (out, stats) = layer.step(&EventFrame::from_tensor(ev)).unwrap();
        assert_eq!(stats.events_in, 1);
        assert_eq!(stats.synops, 2); // fan-out of index 1 is both outputs
        // Output delta is v * column 1 of the weights, plus bias on frame 1.
        assert_eq!(out.values().data()[0], 4.0 * -2.0 + 0.1);
        assert_eq!(out.values().data()[1], 4.0 * 1.0 - 0.2);
    }

    #[test]
    fn zero_input_events_produce_zero_synops_and_events() {
        let mut layer = SigmaDeltaLayer::new(toy_layer(true), 0.0f32).unwrap();
        // Prime with one frame so the bias has been transmitted.
        let mut first = Tensor::zeros(&[3]);
        first.data_mut()[0] = 1.0;
        layer.step(&EventFrame::from_tensor(first)).unwrap();
        let (out, stats) = layer.step(&EventFrame::zeros(&[3])).unwrap();
        assert_eq!(stats.events_in, 0);
        assert_eq!(stats.synops, 0);
        assert_eq!(stats.events_out, 0);
        assert_eq!(out.nonzero_count(), 0);
    }
}
