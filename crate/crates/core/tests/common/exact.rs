use pcc_lmpc::memory::{ExactSafeSet, IterationLog};
use pcc_lmpc::vehicle::VehicleState;

/// Relative allowance for summation rounding between trips.
pub const ROUNDING: f64 = 1e-12;

/// Results of the exact safe-set checks on a list of stored trips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactChecks {
    /// Every member at `t + 1` is a member at `t`.
    pub nesting: bool,
    /// Adding a trip never removes a member or raises Q.
    pub growth: bool,
    /// Q(x_k, k) <= h_k + Q(x_{k+1}, k + 1) along every stored trip, with
    /// equality when a single trip is stored.
    pub one_step: bool,
    /// The set at the budget holds only the goal state, with Q = 0.
    pub terminal: bool,
}

impl ExactChecks {
    pub fn all(&self) -> bool {
        self.nesting && self.growth && self.one_step && self.terminal
    }
}

pub fn check(logs: &[IterationLog], goal: VehicleState) -> ExactChecks {
    let ess = ExactSafeSet::from_logs(logs);
    let n_f = ess.horizon();

    let mut nesting = true;
    for t in 0..n_f {
        for e in ess.members(t + 1) {
            let q = ess.query(&e.state, t);
            nesting &= q.member && q.q <= ess.query(&e.state, t + 1).q;
        }
    }

    let mut growth = true;
    for j in 1..logs.len() {
        let before = ExactSafeSet::from_logs(&logs[..j]);
        let after = ExactSafeSet::from_logs(&logs[..=j]);
        for t in (0..=n_f).step_by(5) {
            for e in before.members(t) {
                let (a, b) = (before.query(&e.state, t), after.query(&e.state, t));
                growth &= b.member && b.q <= a.q;
            }
        }
    }

    let mut one_step = true;
    for log in logs {
        for k in 0..log.horizon {
            let q = ess.query(&log.states[k], k).q;
            let bound = log.stage_costs[k] + ess.query(&log.states[k + 1], k + 1).q;
            // Trips that share a state sum their suffix costs separately, so
            // the two sides can differ in the last bit.
            one_step &= q <= bound * (1.0 + ROUNDING);
        }
    }

    if logs.len() == 1 {
        let log = &logs[0];
        for k in 0..log.horizon {
            let q = ess.query(&log.states[k], k).q;
            let next = ess.query(&log.states[k + 1], k + 1).q;
            one_step &= (q - (log.stage_costs[k] + next)).abs() <= ROUNDING * q.max(1.0);
        }
    }

    let at_end: Vec<_> = ess.members(n_f).collect();
    let terminal = !at_end.is_empty()
        && at_end.iter().all(|e| e.state == goal && e.cost_to_go == 0.0)
        && ess.query(&goal, n_f).q == 0.0;

    ExactChecks {
        nesting,
        growth,
        one_step,
        terminal,
    }
}
