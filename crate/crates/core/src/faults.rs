//! Process-wide fault injection used by the self-test harness to prove its
//! checks can fail. Nothing is injected unless [`inject`] is called.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Fault {
    None = 0,
    /// `squash` returns its input unchanged.
    Squash = 1,
    /// The margin loss drops its negative-class term.
    MarginLoss = 2,
    /// Surface extraction ignores the volume border.
    Surface = 3,
}

static ACTIVE: AtomicU8 = AtomicU8::new(Fault::None as u8);

impl Fault {
    pub fn parse(name: &str) -> Option<Fault> {
        match name {
            "none" => Some(Fault::None),
            "squash" => Some(Fault::Squash),
            "margin" => Some(Fault::MarginLoss),
            "surface" => Some(Fault::Surface),
            _ => None,
        }
    }
}

pub fn inject(fault: Fault) {
    ACTIVE.store(fault as u8, Ordering::SeqCst);
}

pub fn clear() {
    inject(Fault::None);
}

#[inline]
pub(crate) fn active(fault: Fault) -> bool {
    ACTIVE.load(Ordering::Relaxed) == fault as u8
}
