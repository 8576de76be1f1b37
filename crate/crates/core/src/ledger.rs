//! Append-only hash-chained ledger of contributions, partitions, equilibria
//! and reputation updates.
//!
//! Canonical encoding (all integers little-endian):
//!
//! ```text
//! block preimage = index:u64 | round:u64 | body | prev_hash:[u8; 32]
//! body           = count:u64 | record*
//! record         = tag:u8 | fields in declaration order
//! usize fields   → u64, f64 fields → IEEE-754 bits as u64,
//! lists          → len:u64 | items
//! ```
//!
//! `hash = SHA-256(preimage)`. Block 0 carries an all-zero `prev_hash`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::reputation::ReputationStore;
use crate::LearnerId;

pub type Hash = [u8; 32];

const MAGIC: &[u8; 8] = b"GFMLCHN1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Record {
    Contribution {
        learner: LearnerId,
        head: LearnerId,
        theta: f64,
        u: f64,
        t_comp: f64,
        t_comm: f64,
    },
    PartitionCommit {
        coalitions: Vec<Vec<LearnerId>>,
        heads: Vec<LearnerId>,
        parked: Vec<LearnerId>,
    },
    Equilibrium {
        head: LearnerId,
        i_comp: f64,
        u_msp: f64,
        deltas: Vec<(LearnerId, f64)>,
    },
    ReputationUpdate {
        learner: LearnerId,
        head: LearnerId,
        global: f64,
        overall: f64,
    },
    Recruitment {
        r_th: f64,
        i_comp_min: f64,
        i_comp_max: f64,
        i_rep: f64,
    },
}

impl Record {
    fn tag(&self) -> u8 {
        match self {
            Record::Contribution { .. } => 0,
            Record::PartitionCommit { .. } => 1,
            Record::Equilibrium { .. } => 2,
            Record::ReputationUpdate { .. } => 3,
            Record::Recruitment { .. } => 4,
        }
    }

    fn floats(&self) -> Vec<f64> {
        match self {
            Record::Contribution {
                theta,
                u,
                t_comp,
                t_comm,
                ..
            } => vec![*theta, *u, *t_comp, *t_comm],
            Record::PartitionCommit { .. } => vec![],
            Record::Equilibrium {
                i_comp, u_msp, deltas, ..
            } => [*i_comp, *u_msp]
                .into_iter()
                .chain(deltas.iter().map(|d| d.1))
                .collect(),
            Record::ReputationUpdate { global, overall, .. } => vec![*global, *overall],
            Record::Recruitment {
                r_th,
                i_comp_min,
                i_comp_max,
                i_rep,
            } => vec![*r_th, *i_comp_min, *i_comp_max, *i_rep],
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.tag());
        match self {
            Record::Contribution {
                learner,
                head,
                theta,
                u,
                t_comp,
                t_comm,
            } => {
                put_id(out, *learner);
                put_id(out, *head);
                for v in [theta, u, t_comp, t_comm] {
                    put_f64(out, *v);
                }
            }
            Record::PartitionCommit {
                coalitions,
                heads,
                parked,
            } => {
                put_u64(out, coalitions.len() as u64);
                for c in coalitions {
                    put_ids(out, c);
                }
                put_ids(out, heads);
                put_ids(out, parked);
            }
            Record::Equilibrium {
                head,
                i_comp,
                u_msp,
                deltas,
            } => {
                put_id(out, *head);
                put_f64(out, *i_comp);
                put_f64(out, *u_msp);
                put_u64(out, deltas.len() as u64);
                for (l, d) in deltas {
                    put_id(out, *l);
                    put_f64(out, *d);
                }
            }
            Record::ReputationUpdate {
                learner,
                head,
                global,
                overall,
            } => {
                put_id(out, *learner);
                put_id(out, *head);
                put_f64(out, *global);
                put_f64(out, *overall);
            }
            Record::Recruitment {
                r_th,
                i_comp_min,
                i_comp_max,
                i_rep,
            } => {
                for v in [r_th, i_comp_min, i_comp_max, i_rep] {
                    put_f64(out, *v);
                }
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(match r.u8()? {
            0 => Record::Contribution {
                learner: r.id()?,
                head: r.id()?,
                theta: r.f64()?,
                u: r.f64()?,
                t_comp: r.f64()?,
                t_comm: r.f64()?,
            },
            1 => {
                let n = r.len()?;
                let coalitions = (0..n).map(|_| r.ids()).collect::<Result<_>>()?;
                Record::PartitionCommit {
                    coalitions,
                    heads: r.ids()?,
                    parked: r.ids()?,
                }
            }
            2 => {
                let head = r.id()?;
                let i_comp = r.f64()?;
                let u_msp = r.f64()?;
                let n = r.len()?;
                let deltas = (0..n).map(|_| Ok((r.id()?, r.f64()?))).collect::<Result<_>>()?;
                Record::Equilibrium {
                    head,
                    i_comp,
                    u_msp,
                    deltas,
                }
            }
            3 => Record::ReputationUpdate {
                learner: r.id()?,
                head: r.id()?,
                global: r.f64()?,
                overall: r.f64()?,
            },
            4 => Record::Recruitment {
                r_th: r.f64()?,
                i_comp_min: r.f64()?,
                i_comp_max: r.f64()?,
                i_rep: r.f64()?,
            },
            t => return Err(Error::MalformedLedger(format!("unknown record tag {t}"))),
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_id(out: &mut Vec<u8>, v: LearnerId) {
    put_u64(out, v as u64);
}

fn put_ids(out: &mut Vec<u8>, v: &[LearnerId]) {
    put_u64(out, v.len() as u64);
    for &x in v {
        put_id(out, x);
    }
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    put_u64(out, v.to_bits());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedLedger(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn id(&mut self) -> Result<LearnerId> {
        usize::try_from(self.u64()?).map_err(|_| Error::MalformedLedger("id overflows usize".into()))
    }

    /// A list length, bounded by the bytes left so garbage cannot allocate.
    fn len(&mut self) -> Result<usize> {
        let n = self.id()?;
        if n > self.buf.len() - self.pos {
            return Err(Error::MalformedLedger(format!("list length {n} exceeds input")));
        }
        Ok(n)
    }

    fn ids(&mut self) -> Result<Vec<LearnerId>> {
        let n = self.len()?;
        (0..n).map(|_| self.id()).collect()
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn hash(&mut self) -> Result<Hash> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerBlock {
    pub index: u64,
    pub round: u64,
    /// Canonical encoding of the records.
    pub body: Vec<u8>,
    pub prev_hash: Hash,
    pub hash: Hash,
}

impl LedgerBlock {
    pub fn compute_hash(&self) -> Hash {
        let mut h = Sha256::new();
        h.update(self.index.to_le_bytes());
        h.update(self.round.to_le_bytes());
        h.update(&self.body);
        h.update(self.prev_hash);
        h.finalize().into()
    }

    pub fn records(&self) -> Result<Vec<Record>> {
        let mut r = Reader::new(&self.body);
        let n = r.len()?;
        let records = (0..n).map(|_| Record::decode(&mut r)).collect::<Result<Vec<_>>>()?;
        if !r.done() {
            return Err(Error::MalformedLedger(format!(
                "trailing bytes in block {}",
                self.index
            )));
        }
        Ok(records)
    }
}

/// One contribution as reconstructed from the chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionEntry {
    pub round: u64,
    pub theta: f64,
    pub head: LearnerId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ledger {
    blocks: Vec<LedgerBlock>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[LedgerBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Mutable access for tamper tests; never used by the simulator.
    #[doc(hidden)]
    pub fn blocks_mut(&mut self) -> &mut [LedgerBlock] {
        &mut self.blocks
    }

    /// Chains a new block of `records` onto the tip.
    pub fn append(&mut self, round: u64, records: &[Record]) -> Result<&LedgerBlock> {
        if let Some(tip) = self.blocks.last() {
            if round < tip.round {
                return Err(Error::NonMonotoneRound { round, tip: tip.round });
            }
        }
        if let Some(bad) = records.iter().find(|r| r.floats().iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidParam(format!("non-finite field in {bad:?}")));
        }
        let mut body = Vec::new();
        put_u64(&mut body, records.len() as u64);
        for r in records {
            r.encode(&mut body);
        }
        let mut block = LedgerBlock {
            index: self.blocks.len() as u64,
            round,
            body,
            prev_hash: self.blocks.last().map_or([0; 32], |b| b.hash),
            hash: [0; 32],
        };
        block.hash = block.compute_hash();
        self.blocks.push(block);
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// `Err(k)` with the first block whose hash, index or link is wrong.
    pub fn verify(&self) -> std::result::Result<(), usize> {
        let mut prev: Hash = [0; 32];
        for (k, b) in self.blocks.iter().enumerate() {
            if b.index != k as u64 || b.prev_hash != prev || b.compute_hash() != b.hash {
                return Err(k);
            }
            prev = b.hash;
        }
        Ok(())
    }

    /// Contributions of `learner` in round order, optionally for one head.
    pub fn query_contributions(&self, learner: LearnerId, head: Option<LearnerId>) -> Result<Vec<ContributionEntry>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for r in b.records()? {
                if let Record::Contribution {
                    learner: l,
                    head: h,
                    theta,
                    ..
                } = r
                {
                    if l == learner && head.is_none_or(|x| x == h) {
                        out.push(ContributionEntry {
                            round: b.round,
                            theta,
                            head: h,
                        });
                    }
                }
            }
        }
        out.sort_by_key(|e| e.round);
        Ok(out)
    }

    /// Rebuilds a reputation store from the contribution records alone.
    pub fn reputation_store(&self, lambda: f64, phi: f64) -> Result<ReputationStore> {
        let mut store = ReputationStore::new(lambda, phi)?;
        for b in &self.blocks {
            for r in b.records()? {
                if let Record::Contribution {
                    learner, head, theta, ..
                } = r
                {
                    store.record(learner, head, b.round, theta)?;
                }
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u64(&mut out, self.blocks.len() as u64);
        for b in &self.blocks {
            put_u64(&mut out, b.index);
            put_u64(&mut out, b.round);
            put_u64(&mut out, b.body.len() as u64);
            out.extend_from_slice(&b.body);
            out.extend_from_slice(&b.prev_hash);
            out.extend_from_slice(&b.hash);
        }
        out
    }

    /// Parses a dump; integrity is left to [`Ledger::verify`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::MalformedLedger("bad magic".into()));
        }
        let n = r.len()?;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let index = r.u64()?;
            let round = r.u64()?;
            let len = r.len()?;
            blocks.push(LedgerBlock {
                index,
                round,
                body: r.take(len)?.to_vec(),
                prev_hash: r.hash()?,
                hash: r.hash()?,
            });
        }
        if !r.done() {
            return Err(Error::MalformedLedger("trailing bytes after last block".into()));
        }
        Ok(Self { blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Inspection dump with hex digests and decoded records.
    pub fn to_json(&self) -> Result<serde_json::Value> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                Ok(serde_json::json!({
                    "index": b.index,
                    "round": b.round,
                    "prev_hash": hex::encode(b.prev_hash),
                    "hash": hex::encode(b.hash),
                    "records": b.records()?,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(serde_json::Value::Array(blocks))
    }
}
