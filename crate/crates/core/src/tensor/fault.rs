//! Fault injection for exercising the gradient-check harness.
//!
//! The multiplier is thread-local so an injected fault in one test cannot
//! leak into concurrently running ones.

use std::cell::Cell;

thread_local! {
    static SIGMOID_BACKWARD_SCALE: Cell<f64> = const { Cell::new(1.0) };
}

/// Multiplies every sigmoid backward contribution on this thread by `scale`.
pub fn set_sigmoid_backward_scale(scale: f64) {
    SIGMOID_BACKWARD_SCALE.with(|c| c.set(scale));
}

pub fn sigmoid_backward_scale() -> f64 {
    SIGMOID_BACKWARD_SCALE.with(|c| c.get())
}

/// Restores the correct backward pass when dropped.
pub struct SigmoidFault(());

impl SigmoidFault {
    pub fn inject(scale: f64) -> Self {
        set_sigmoid_backward_scale(scale);
        SigmoidFault(())
    }
}

impl Drop for SigmoidFault {
    fn drop(&mut self) {
        set_sigmoid_backward_scale(1.0);
    }
}
