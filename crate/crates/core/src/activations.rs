//! Per-thread accounting of live activation storage, in f64 elements.
//!
//! Forward caches and checkpointed layer inputs hold a [`Charge`] for the
//! storage they keep alive; the meter records the high-water mark.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Resets the high-water mark to the current live count.
pub fn reset_peak() {
    PEAK.with(|p| p.set(live()));
}

pub fn live() -> usize {
    LIVE.with(Cell::get)
}

pub fn peak() -> usize {
    PEAK.with(Cell::get)
}

#[derive(Debug)]
pub struct Charge(usize);

impl Charge {
    pub fn new(elements: usize) -> Self {
        LIVE.with(|l| {
            let now = l.get() + elements;
            l.set(now);
            PEAK.with(|p| p.set(p.get().max(now)));
        });
        Charge(elements)
    }

    pub fn elements(&self) -> usize {
        self.0
    }
}

impl Drop for Charge {
    fn drop(&mut self) {
        LIVE.with(|l| l.set(l.get() - self.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        reset_peak();
        let base = live();
        let a = Charge::new(10);
        {
            let _b = Charge::new(5);
            assert_eq!(live(), base + 15);
        }
        assert_eq!(live(), base + 10);
        drop(a);
        assert_eq!(live(), base);
        assert_eq!(peak(), base + 15);
    }
}
