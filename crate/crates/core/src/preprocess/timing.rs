//! Timestamp to cycle-state mapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CycleState, NUM_STATES};

/// Partition of one assembly cycle into 21 contiguous state windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawTiming")]
pub struct CycleTiming {
    pub cycle_period_ms: u64,
    /// Half-open `[start, end)` windows, one per state, in state order.
    pub state_windows: Vec<(u64, u64)>,
    /// Accepted slice `[a, b)` of the state-9 window, as fractions.
    pub state9_subwindow: (f64, f64),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTiming {
    cycle_period_ms: u64,
    state_windows: Vec<(u64, u64)>,
    #[serde(default = "full_subwindow")]
    state9_subwindow: (f64, f64),
}

fn full_subwindow() -> (f64, f64) {
    (0.0, 1.0)
}

impl TryFrom<RawTiming> for CycleTiming {
    type Error = Error;

    fn try_from(raw: RawTiming) -> Result<Self> {
        let t = CycleTiming {
            cycle_period_ms: raw.cycle_period_ms,
            state_windows: raw.state_windows,
            state9_subwindow: raw.state9_subwindow,
        };
        t.validate()?;
        Ok(t)
    }
}

impl Default for CycleTiming {
    /// 21-second cycle, one second per state.
    fn default() -> Self {
        CycleTiming::uniform(21_000).expect("21000 ms splits into 21 windows")
    }
}

impl CycleTiming {
    /// Equal-width windows; window `i` starts at `floor(i·period/21)`.
    pub fn uniform(cycle_period_ms: u64) -> Result<Self> {
        let n = NUM_STATES as u64;
        if cycle_period_ms < n {
            return Err(Error::invalid(format!(
                "cycle period {cycle_period_ms} ms too short for 21 nonempty windows"
            )));
        }
        let bound = |i: u64| i * cycle_period_ms / n;
        let state_windows = (0..n).map(|i| (bound(i), bound(i + 1))).collect();
        Ok(CycleTiming {
            cycle_period_ms,
            state_windows,
            state9_subwindow: full_subwindow(),
        })
    }

    pub fn with_state9_subwindow(mut self, a: f64, b: f64) -> Result<Self> {
        self.state9_subwindow = (a, b);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycle_period_ms == 0 {
            return Err(Error::invalid("cycle_period_ms must be > 0"));
        }
        if self.state_windows.len() != NUM_STATES as usize {
            return Err(Error::invalid(format!(
                "expected 21 state windows, got {}",
                self.state_windows.len()
            )));
        }
        let mut expected_start = 0;
        for (i, &(start, end)) in self.state_windows.iter().enumerate() {
            if start != expected_start || end <= start {
                return Err(Error::invalid(format!(
                    "state window {} = [{start},{end}) must start at {expected_start} and be nonempty",
                    i + 1
                )));
            }
            expected_start = end;
        }
        if expected_start != self.cycle_period_ms {
            return Err(Error::invalid(format!(
                "state windows end at {expected_start}, cycle period is {}",
                self.cycle_period_ms
            )));
        }
        let (a, b) = self.state9_subwindow;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a >= b {
            return Err(Error::invalid(format!("state9_subwindow ({a},{b}) needs 0 <= a < b <= 1")));
        }
        Ok(())
    }

    pub fn window(&self, state: CycleState) -> (u64, u64) {
        self.state_windows[state.value() as usize - 1]
    }

    /// Position of `timestamp_ms` inside its state window, in `[0,1)`.
    pub fn window_fraction(&self, timestamp_ms: u64) -> f64 {
        let (_, state) = map_timestamp_to_state(timestamp_ms, self);
        let (start, end) = self.window(state);
        let phase = timestamp_ms % self.cycle_period_ms;
        (phase - start) as f64 / (end - start) as f64
    }
}

/// Maps a timestamp to `(cycle_index, state)`; cycles count from 1.
pub fn map_timestamp_to_state(timestamp_ms: u64, timing: &CycleTiming) -> (u64, CycleState) {
    let cycle_index = timestamp_ms / timing.cycle_period_ms + 1;
    let phase = timestamp_ms % timing.cycle_period_ms;
    // Windows are sorted and contiguous, so the first window whose end
    // exceeds the phase contains it.
    let idx = timing.state_windows.partition_point(|&(_, end)| end <= phase);
    let state = CycleState::new(idx as u8 + 1).expect("windows cover the whole period");
    (cycle_index, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn timing() -> CycleTiming {
        CycleTiming::uniform(2100).unwrap()
    }

    fn linear_scan(t: u64, timing: &CycleTiming) -> u8 {
        let phase = t % timing.cycle_period_ms;
        for (i, &(a, b)) in timing.state_windows.iter().enumerate() {
            if a <= phase && phase < b {
                return i as u8 + 1;
            }
        }
        unreachable!()
    }

    #[test]
    fn examples() {
        let t = timing();
        assert_eq!(map_timestamp_to_state(0, &t), (1, CycleState::new(1).unwrap()));
        assert_eq!(linear_scan(350, &t), 4);
        assert_eq!(map_timestamp_to_state(350, &t), (1, CycleState::new(4).unwrap()));
        assert_eq!(map_timestamp_to_state(2100, &t), (2, CycleState::new(1).unwrap()));
        assert_eq!(map_timestamp_to_state(2099, &t).1.value(), 21);
    }

    #[test]
    fn validation() {
        let mut t = timing();
        t.state_windows.pop();
        assert!(t.validate().is_err());
        let mut t = timing();
        t.state_windows[3].0 += 1;
        assert!(t.validate().is_err());
        assert!(timing().with_state9_subwindow(0.5, 0.5).is_err());
        assert!(CycleTiming::uniform(20).is_err());
        let json = serde_json::to_string(&timing()).unwrap();
        assert_eq!(serde_json::from_str::<CycleTiming>(&json).unwrap(), timing());
        assert!(serde_json::from_str::<CycleTiming>(r#"{"cycle_period_ms":5,"state_windows":[]}"#).is_err());
    }

    proptest! {
        #[test]
        fn mapping_is_periodic_and_monotone(period in 21u64..100_000, t in 0u64..10_000_000) {
            let timing = CycleTiming::uniform(period).unwrap();
            let (c, s) = map_timestamp_to_state(t, &timing);
            let (c2, s2) = map_timestamp_to_state(t + period, &timing);
            prop_assert_eq!(s, s2);
            prop_assert_eq!(c2, c + 1);
            prop_assert_eq!(s.value(), linear_scan(t, &timing));
            if (t + 1) % period != 0 {
                prop_assert!(map_timestamp_to_state(t + 1, &timing).1 >= s);
            }
            let f = timing.window_fraction(t);
            prop_assert!((0.0..1.0).contains(&f));
        }
    }
}
