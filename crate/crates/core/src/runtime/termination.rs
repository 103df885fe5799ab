//! Ring-token termination detection.
//!
//! Rank 0 sends a token around the ring `0 → 1 → … → P−1 → 0`. Every rank
//! adds its running totals of events fired and events received
//! (`fired − received` into `global_deficit`) and paints the token black if
//! it is not locally quiescent at the moment of the visit. A rank is locally
//! quiescent when its main context has entered finalise, no task is queued,
//! running or paused, no transient task is waiting for dependencies and no
//! non-persistent event is buffered.
//!
//! Rank 0 declares global termination after two consecutive rounds that both
//! come back white with a zero deficit and identical fired totals. Counters
//! only grow, so equal totals in two rounds mean no rank fired or received
//! anything between its two visits; together with a zero deficit this leaves
//! nothing in flight, and a quiescent rank that receives nothing stays
//! quiescent.

/// Colour of a token. Black means some rank was busy at its visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenColor {
    White,
    Black,
}

/// The token circulated by the termination detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TerminationToken {
    pub color: TokenColor,
    /// Σ (fired − received) over the ranks visited so far.
    pub global_deficit: i64,
    /// Σ fired over the ranks visited so far.
    pub fired_total: u64,
    pub round: u64,
}

/// What a rank knows about itself at a token visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalStatus {
    pub quiescent: bool,
    pub fired: u64,
    pub received: u64,
}

impl TerminationToken {
    fn absorb(mut self, local: LocalStatus) -> Self {
        if !local.quiescent {
            self.color = TokenColor::Black;
        }
        self.global_deficit += local.fired as i64 - local.received as i64;
        self.fired_total += local.fired;
        self
    }

    fn is_clean(&self) -> bool {
        self.color == TokenColor::White && self.global_deficit == 0
    }
}

/// What to do after handling a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenAction {
    /// Send the token to this rank.
    Forward { to: usize, token: TerminationToken },
    /// Rank 0 only: the round failed; start another one.
    Retry,
    /// Rank 0 only: the system has terminated.
    Terminated,
}

/// Per-rank detector state.
#[derive(Debug, Clone)]
pub struct TerminationDetector {
    rank: usize,
    world_size: usize,
    round: u64,
    in_flight: bool,
    last_clean: Option<u64>,
    completed_rounds: u64,
}

impl TerminationDetector {
    pub fn new(rank: usize, world_size: usize) -> Self {
        TerminationDetector {
            rank,
            world_size,
            round: 0,
            in_flight: false,
            last_clean: None,
            completed_rounds: 0,
        }
    }

    pub fn is_initiator(&self) -> bool {
        self.rank == 0
    }

    /// Whether rank 0 has a token circulating.
    pub fn round_in_flight(&self) -> bool {
        self.in_flight
    }

    pub fn completed_rounds(&self) -> u64 {
        self.completed_rounds
    }

    fn next(&self) -> usize {
        (self.rank + 1) % self.world_size
    }

    /// Rank 0 starts a round. With a single rank the round completes at once.
    pub fn start_round(&mut self, local: LocalStatus) -> TokenAction {
        assert!(self.is_initiator(), "only rank 0 starts termination rounds");
        assert!(!self.in_flight, "a round is already circulating");
        self.round += 1;
        let token = TerminationToken {
            color: TokenColor::White,
            global_deficit: 0,
            fired_total: 0,
            round: self.round,
        }
        .absorb(local);
        if self.world_size == 1 {
            return self.finish_round(token);
        }
        self.in_flight = true;
        TokenAction::Forward {
            to: self.next(),
            token,
        }
    }

    /// Handles a token arriving from the previous rank.
    pub fn on_token(&mut self, token: TerminationToken, local: LocalStatus) -> TokenAction {
        if self.is_initiator() {
            // Rank 0 contributed when it started the round.
            self.in_flight = false;
            return self.finish_round(token);
        }
        TokenAction::Forward {
            to: self.next(),
            token: token.absorb(local),
        }
    }

    fn finish_round(&mut self, token: TerminationToken) -> TokenAction {
        self.completed_rounds += 1;
        if !token.is_clean() {
            self.last_clean = None;
            return TokenAction::Retry;
        }
        if self.last_clean == Some(token.fired_total) {
            return TokenAction::Terminated;
        }
        self.last_clean = Some(token.fired_total);
        TokenAction::Retry
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idle(fired: u64, received: u64) -> LocalStatus {
        LocalStatus {
            quiescent: true,
            fired,
            received,
        }
    }

    /// Runs one full round over `statuses` (indexed by rank).
    fn round(dets: &mut [TerminationDetector], statuses: &[LocalStatus]) -> TokenAction {
        let mut action = dets[0].start_round(statuses[0]);
        while let TokenAction::Forward { to, token } = action {
            action = dets[to].on_token(token, statuses[to]);
        }
        action
    }

    fn ring(p: usize) -> Vec<TerminationDetector> {
        (0..p).map(|r| TerminationDetector::new(r, p)).collect()
    }

    #[test]
    fn idle_system_terminates_after_two_rounds() {
        let mut dets = ring(3);
        let st = [idle(2, 1), idle(0, 1), idle(1, 1)];
        assert_eq!(round(&mut dets, &st), TokenAction::Retry);
        assert_eq!(round(&mut dets, &st), TokenAction::Terminated);
    }

    #[test]
    fn in_flight_event_blocks_verdict() {
        let mut dets = ring(2);
        let st = [idle(1, 0), idle(0, 0)];
        for _ in 0..4 {
            assert_eq!(round(&mut dets, &st), TokenAction::Retry);
        }
        // delivered: counters catch up, two more clean rounds needed
        let st = [idle(1, 0), idle(0, 1)];
        assert_eq!(round(&mut dets, &st), TokenAction::Retry);
        assert_eq!(round(&mut dets, &st), TokenAction::Terminated);
    }

    #[test]
    fn busy_rank_paints_black() {
        let mut dets = ring(2);
        let busy = [
            idle(0, 0),
            LocalStatus {
                quiescent: false,
                fired: 0,
                received: 0,
            },
        ];
        for _ in 0..3 {
            assert_eq!(round(&mut dets, &busy), TokenAction::Retry);
        }
    }

    #[test]
    fn changed_totals_between_clean_rounds_restart_confirmation() {
        let mut dets = ring(2);
        assert_eq!(round(&mut dets, &[idle(1, 1), idle(0, 0)]), TokenAction::Retry);
        // activity happened entirely between visits, totals moved
        assert_eq!(round(&mut dets, &[idle(2, 1), idle(0, 1)]), TokenAction::Retry);
        assert_eq!(round(&mut dets, &[idle(2, 1), idle(0, 1)]), TokenAction::Terminated);
    }

    #[test]
    fn single_rank() {
        let mut d = TerminationDetector::new(0, 1);
        assert_eq!(d.start_round(idle(3, 3)), TokenAction::Retry);
        assert_eq!(d.start_round(idle(3, 3)), TokenAction::Terminated);
    }
}
