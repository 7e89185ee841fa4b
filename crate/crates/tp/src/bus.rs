//! Simulated all-reduce between in-process shards.
//!
//! Each shard numbers its own rounds. A round completes once every shard has
//! posted to it; the sum is shard 0's payload plus the others in ascending
//! shard order, so every participant receives the same bits and a world of one
//! returns its input unchanged.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use m2rnn_core::{Scalar, Tensor};

use crate::error::{Result, TpError};

/// One completed reduction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReduceRecord {
    pub round: usize,
    pub op: String,
    pub elements: usize,
}

struct Round<T> {
    op: String,
    slots: Vec<Option<Tensor<T>>>,
    result: Option<Result<Tensor<T>>>,
    taken: usize,
}

struct State<T> {
    next_round: Vec<usize>,
    departed: Vec<bool>,
    rounds: BTreeMap<usize, Round<T>>,
    log: Vec<ReduceRecord>,
}

pub struct CollectiveBus<T> {
    world: usize,
    state: Mutex<State<T>>,
    ready: Condvar,
    timeout: Duration,
}

/// `payloads[0] + payloads[1] + ...` in ascending order.
pub fn reduce_sum<T: Scalar>(payloads: &[&Tensor<T>]) -> Tensor<T> {
    let mut acc = payloads[0].clone();
    for p in &payloads[1..] {
        for (a, &b) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
    }
    acc
}

impl<T: Scalar> CollectiveBus<T> {
    pub fn new(world: usize) -> Self {
        assert!(world > 0, "bus needs at least one shard");
        Self {
            world,
            state: Mutex::new(State {
                next_round: vec![0; world],
                departed: vec![false; world],
                rounds: BTreeMap::new(),
                log: Vec::new(),
            }),
            ready: Condvar::new(),
            timeout: Duration::from_secs(60),
        }
    }

    pub fn world(&self) -> usize {
        self.world
    }

    /// Contributes `payload` to this shard's next round without blocking.
    pub fn post(&self, shard: usize, op: &str, payload: Tensor<T>) -> Result<()> {
        let mut st = self.state.lock().expect("bus lock");
        let round = st.next_round[shard];
        st.next_round[shard] += 1;
        let world = self.world;
        let entry = st.rounds.entry(round).or_insert_with(|| Round {
            op: op.to_string(),
            slots: vec![None; world],
            result: None,
            taken: 0,
        });
        let mismatch = if entry.op != op {
            Some(format!("shard {shard} posted {op:?} but the round is {:?}", entry.op))
        } else {
            entry
                .slots
                .iter()
                .flatten()
                .next()
                .filter(|other| other.shape() != payload.shape())
                .map(|other| {
                    format!(
                        "shard {shard} posted shape {:?}, others posted {:?}",
                        payload.shape(),
                        other.shape()
                    )
                })
        };
        if let Some(msg) = mismatch {
            entry.result = Some(Err(TpError::Protocol { round, msg }));
        } else {
            entry.slots[shard] = Some(payload);
        }
        if entry.result.is_none() && entry.slots.iter().all(Option::is_some) {
            let parts: Vec<&Tensor<T>> = entry.slots.iter().flatten().collect();
            let sum = reduce_sum(&parts);
            let record = ReduceRecord {
                round,
                op: entry.op.clone(),
                elements: sum.len(),
            };
            entry.result = Some(Ok(sum));
            entry.slots.iter_mut().for_each(|s| *s = None);
            st.log.push(record);
        }
        drop(st);
        self.ready.notify_all();
        Ok(())
    }

    /// Blocks until this shard's most recently posted round is reduced.
    pub fn wait(&self, shard: usize) -> Result<Tensor<T>> {
        let mut st = self.state.lock().expect("bus lock");
        let round = st.next_round[shard].checked_sub(1).ok_or_else(|| TpError::Protocol {
            round: 0,
            msg: format!("shard {shard} waited before posting"),
        })?;
        loop {
            let departed = st.departed.clone();
            let r = st.rounds.get_mut(&round).expect("posted round exists");
            if let Some(res) = &r.result {
                let out = res.clone();
                r.taken += 1;
                if r.taken == self.world {
                    st.rounds.remove(&round);
                }
                return out;
            }
            let missing: Vec<usize> = (0..self.world)
                .filter(|&s| r.slots[s].is_none() && departed[s])
                .collect();
            if !missing.is_empty() {
                return Err(TpError::MissingParticipant {
                    round,
                    op: r.op.clone(),
                    missing,
                });
            }
            let (guard, timeout) = self.ready.wait_timeout(st, self.timeout).expect("bus lock");
            st = guard;
            if timeout.timed_out() {
                let r = &st.rounds[&round];
                let missing = (0..self.world).filter(|&s| r.slots[s].is_none()).collect();
                return Err(TpError::MissingParticipant {
                    round,
                    op: r.op.clone(),
                    missing,
                });
            }
        }
    }

    pub fn all_reduce_sum(&self, shard: usize, op: &str, payload: Tensor<T>) -> Result<Tensor<T>> {
        self.post(shard, op, payload)?;
        self.wait(shard)
    }

    /// Marks `shard` as finished; rounds it never joined fail instead of hanging.
    pub fn depart(&self, shard: usize) {
        self.state.lock().expect("bus lock").departed[shard] = true;
        self.ready.notify_all();
    }

    /// Completed reductions in round order.
    pub fn log(&self) -> Vec<ReduceRecord> {
        self.state.lock().expect("bus lock").log.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use m2rnn_core::SeededRng;

    #[test]
    fn two_shard_sum() {
        let bus = CollectiveBus::<f64>::new(2);
        bus.post(0, "x", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        bus.post(1, "x", Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(bus.wait(0).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(bus.wait(1).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(
            bus.log(),
            vec![ReduceRecord {
                round: 0,
                op: "x".into(),
                elements: 2
            }]
        );
    }

    #[test]
    fn world_of_one_is_identity() {
        let bus = CollectiveBus::<f64>::new(1);
        let t = SeededRng::new(1).normal_tensor(&[3, 2], 1.0);
        assert_eq!(bus.all_reduce_sum(0, "x", t.clone()).unwrap(), t);
    }

    #[test]
    fn threaded_sum_matches_sequential_oracle_bitwise() {
        let mut rng = SeededRng::new(2);
        let payloads: Vec<Tensor<f64>> = (0..4).map(|_| rng.normal_tensor(&[5, 3], 1.0)).collect();
        let mut expect = payloads[0].clone();
        for p in &payloads[1..] {
            expect = expect.add(p).unwrap();
        }
        let bus = CollectiveBus::new(4);
        let results: Vec<Tensor<f64>> = std::thread::scope(|s| {
            let handles: Vec<_> = payloads
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let bus = &bus;
                    s.spawn(move || bus.all_reduce_sum(i, "x", p.clone()).unwrap())
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            assert_eq!(r, expect);
        }
    }

    #[test]
    fn shape_mismatch_is_a_protocol_error() {
        let bus = CollectiveBus::<f64>::new(2);
        bus.post(0, "x", Tensor::zeros(&[2])).unwrap();
        bus.post(1, "x", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(bus.wait(0), Err(TpError::Protocol { .. })));
    }

    #[test]
    fn op_mismatch_is_a_protocol_error() {
        let bus = CollectiveBus::<f64>::new(2);
        bus.post(0, "dq", Tensor::zeros(&[2])).unwrap();
        bus.post(1, "dk", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(bus.wait(1), Err(TpError::Protocol { .. })));
    }

    #[test]
    fn departed_shard_is_reported_missing() {
        let bus = CollectiveBus::<f64>::new(3);
        bus.post(0, "x", Tensor::zeros(&[1])).unwrap();
        bus.post(2, "x", Tensor::zeros(&[1])).unwrap();
        bus.depart(1);
        match bus.wait(0) {
            Err(TpError::MissingParticipant { missing, .. }) => assert_eq!(missing, vec![1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rounds_are_logged_in_order() {
        let bus = CollectiveBus::<f64>::new(2);
        for (i, op) in ["a", "b", "c"].into_iter().enumerate() {
            for s in 0..2 {
                bus.post(s, op, Tensor::zeros(&[i + 1])).unwrap();
            }
            for s in 0..2 {
                bus.wait(s).unwrap();
            }
        }
        let log = bus.log();
        assert_eq!(log.iter().map(|r| r.round).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(log.iter().map(|r| r.elements).collect::<Vec<_>>(), vec![1, 2, 3]);
    }
}
