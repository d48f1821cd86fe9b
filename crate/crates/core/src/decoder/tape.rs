//! Records the discrete choices of piecewise operations (ReLU masks, pool
//! arg-extrema, clamps) so a forward pass can be replayed on the same smooth
//! piece. Finite-difference checks replay the base point's choices; ordinary
//! passes run free.

#[derive(Debug, Clone, Default)]
enum Mode {
    #[default]
    Free,
    Record,
    Replay,
}

#[derive(Debug, Clone, Default)]
pub struct BranchTape {
    mode: Mode,
    log: Vec<u8>,
    cursor: usize,
}

impl BranchTape {
    pub fn free() -> Self {
        Self::default()
    }

    pub fn record() -> Self {
        Self { mode: Mode::Record, ..Self::default() }
    }

    /// Replays the choices captured by a recording tape.
    pub fn replay_of(recorded: &BranchTape) -> Self {
        Self { mode: Mode::Replay, log: recorded.log.clone(), cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    #[inline]
    pub fn decide(&mut self, natural: u8) -> u8 {
        match self.mode {
            Mode::Free => natural,
            Mode::Record => {
                self.log.push(natural);
                natural
            }
            Mode::Replay => {
                let v = self.log[self.cursor];
                self.cursor += 1;
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_returns_recorded_choices() {
        let mut rec = BranchTape::record();
        assert_eq!(rec.decide(1), 1);
        assert_eq!(rec.decide(0), 0);
        let mut rep = BranchTape::replay_of(&rec);
        assert_eq!(rep.decide(0), 1);
        assert_eq!(rep.decide(1), 0);
        let mut free = BranchTape::free();
        assert_eq!(free.decide(3), 3);
        assert!(free.is_empty());
    }
}
