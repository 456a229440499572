use std::collections::VecDeque;

use rand::Rng;

use super::{PolicyError, Result};
use crate::envdata::Dataset;
use crate::rng::Stream;

/// One stored transition with every sampled successor.
///
/// `next` holds `members * N` states, member-major. `stop[k]` removes the
/// bootstrap term of successor `k` (energy truncation or terminal state).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub next: Vec<Vec<f64>>,
    pub stop: Vec<bool>,
    pub members: usize,
}

impl Sample {
    /// A real transition: one successor from one "member".
    pub fn real(s: Vec<f64>, a: Vec<f64>, r: f64, s_next: Vec<f64>, done: bool) -> Self {
        Self {
            s,
            a,
            r,
            next: vec![s_next],
            stop: vec![done],
            members: 1,
        }
    }

    pub fn per_member(&self) -> usize {
        self.next.len() / self.members
    }
}

/// Fixed real data plus a bounded FIFO of synthetic rows.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    real: Vec<Sample>,
    synthetic: VecDeque<Sample>,
    capacity: usize,
    real_ratio: f64,
}

impl ReplayBuffer {
    pub fn new(real: Vec<Sample>, capacity: usize, real_ratio: f64) -> Result<Self> {
        if real.is_empty() {
            return Err(PolicyError::Empty);
        }
        if !(0.0..=1.0).contains(&real_ratio) || capacity == 0 {
            return Err(PolicyError::Config(format!(
                "real ratio {real_ratio} must lie in [0,1] and capacity be positive"
            )));
        }
        Ok(Self {
            real,
            synthetic: VecDeque::new(),
            capacity,
            real_ratio,
        })
    }

    pub fn from_dataset(data: &Dataset, capacity: usize, real_ratio: f64) -> Result<Self> {
        let real = data
            .rows
            .iter()
            .map(|t| Sample::real(t.s.clone(), t.a.clone(), t.r, t.s_next.clone(), t.done))
            .collect();
        Self::new(real, capacity, real_ratio)
    }

    pub fn push(&mut self, row: Sample) {
        if self.synthetic.len() == self.capacity {
            self.synthetic.pop_front();
        }
        self.synthetic.push_back(row);
    }

    pub fn real_len(&self) -> usize {
        self.real.len()
    }

    pub fn synthetic_len(&self) -> usize {
        self.synthetic.len()
    }

    /// Each draw is real with probability `real_ratio` (always real while no
    /// synthetic rows exist). Returns the rows and how many were real.
    pub fn sample(&self, batch: usize, rng: &mut Stream) -> (Vec<&Sample>, usize) {
        let mut out = Vec::with_capacity(batch);
        let mut n_real = 0;
        for _ in 0..batch {
            let real = self.synthetic.is_empty() || rng.random::<f64>() < self.real_ratio;
            if real {
                n_real += 1;
                out.push(&self.real[rng.random_range(0..self.real.len())]);
            } else {
                out.push(&self.synthetic[rng.random_range(0..self.synthetic.len())]);
            }
        }
        (out, n_real)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn row(v: f64) -> Sample {
        Sample::real(vec![v], vec![0.0], v, vec![v], false)
    }

    #[test]
    fn ratio_converges() {
        let mut buf = ReplayBuffer::new((0..50).map(|i| row(i as f64)).collect(), 100, 0.05).unwrap();
        for i in 0..100 {
            buf.push(row(1000.0 + i as f64));
        }
        let (rows, n_real) = buf.sample(10_000, &mut rng::stream(3));
        assert_eq!(rows.len(), 10_000);
        assert!((n_real as f64 / 10_000.0 - 0.05).abs() < 0.01, "{n_real}");
        assert_eq!(rows.iter().filter(|r| r.s[0] < 1000.0).count(), n_real);
    }

    #[test]
    fn capacity_and_empty_cases() {
        let mut buf = ReplayBuffer::new(vec![row(0.0)], 2, 0.0).unwrap();
        let (rows, n_real) = buf.sample(5, &mut rng::stream(0));
        assert_eq!((rows.len(), n_real), (5, 5));
        for i in 1..=3 {
            buf.push(row(i as f64));
        }
        assert_eq!(buf.synthetic_len(), 2);
        let (rows, n_real) = buf.sample(50, &mut rng::stream(0));
        assert_eq!(n_real, 0);
        assert!(rows.iter().all(|r| r.s[0] >= 2.0));
        assert!(ReplayBuffer::new(vec![], 2, 0.1).is_err());
        assert!(ReplayBuffer::new(vec![row(0.0)], 2, 1.5).is_err());
    }
}
