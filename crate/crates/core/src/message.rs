//! Neighbour-to-neighbour message payloads and their byte encoding.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! estimate: kind=1 u8 | n u32 | n*n f64 (row-major) | convergence
//! trade:    kind=2 u8 | n u32 | t f64                | convergence
//! convergence: n bytes ready (0/1) | n u64 dist | u64 switch_at
//! ```
//!
//! `u64::MAX` encodes an unknown distance or unscheduled switch. Floats are
//! carried bit-exactly, which the trade averaging relies on.

use nalgebra::DMatrix;

use crate::consensus::ConvergenceState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PayloadKind {
    Estimate,
    Trade,
}

impl PayloadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PayloadKind::Estimate => "estimate",
            PayloadKind::Trade => "trade",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Adjacency estimate plus convergence variables.
    Estimate {
        matrix: DMatrix<f64>,
        convergence: ConvergenceState,
    },
    /// The sender's trade with the receiver plus convergence variables.
    Trade {
        trade: f64,
        convergence: ConvergenceState,
    },
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Estimate { .. } => PayloadKind::Estimate,
            Payload::Trade { .. } => PayloadKind::Trade,
        }
    }

    pub fn convergence(&self) -> &ConvergenceState {
        match self {
            Payload::Estimate { convergence, .. } | Payload::Trade { convergence, .. } => {
                convergence
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let conv = self.convergence();
        let n = conv.ready.len();
        match self {
            Payload::Estimate { matrix, .. } => {
                out.push(1);
                out.extend_from_slice(&(n as u32).to_le_bytes());
                for r in 0..n {
                    for c in 0..n {
                        out.extend_from_slice(&matrix[(r, c)].to_le_bytes());
                    }
                }
            }
            Payload::Trade { trade, .. } => {
                out.push(2);
                out.extend_from_slice(&(n as u32).to_le_bytes());
                out.extend_from_slice(&trade.to_le_bytes());
            }
        }
        out.extend(conv.ready.iter().map(|&b| b as u8));
        for d in &conv.dist {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&conv.switch_at.to_le_bytes());
        out
    }

    /// Decodes a payload; `owner` is the sender, recorded in the embedded
    /// convergence state.
    pub fn decode(bytes: &[u8], owner: usize) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let kind = rd.u8()?;
        let n = rd.u32()? as usize;
        let body = match kind {
            1 => {
                let mut matrix = DMatrix::zeros(n, n);
                for r in 0..n {
                    for c in 0..n {
                        matrix[(r, c)] = rd.f64()?;
                    }
                }
                Some(matrix)
            }
            2 => None,
            other => return Err(Error::Payload(format!("unknown payload kind {other}"))),
        };
        let trade = if kind == 2 { rd.f64()? } else { 0.0 };
        let mut ready = Vec::with_capacity(n);
        for _ in 0..n {
            ready.push(match rd.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Payload(format!("bad ready flag {b}"))),
            });
        }
        let mut dist = Vec::with_capacity(n);
        for _ in 0..n {
            dist.push(rd.u64()?);
        }
        let switch_at = rd.u64()?;
        if rd.pos != bytes.len() {
            return Err(Error::Payload("trailing bytes".into()));
        }
        if owner >= n {
            return Err(Error::Payload(format!("sender {owner} out of range")));
        }
        let convergence = ConvergenceState {
            owner,
            ready,
            dist,
            switch_at,
        };
        Ok(match body {
            Some(matrix) => Payload::Estimate {
                matrix,
                convergence,
            },
            None => Payload::Trade { trade, convergence },
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Payload("truncated payload".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

/// A payload in flight between two neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageEnvelope {
    pub sender: usize,
    pub receiver: usize,
    /// Step at which the message was sent; it is delivered at `step + 1`.
    pub step: u64,
    pub kind: PayloadKind,
    pub bytes: Vec<u8>,
}

impl MessageEnvelope {
    pub fn new(sender: usize, receiver: usize, step: u64, payload: &Payload) -> Self {
        Self {
            sender,
            receiver,
            step,
            kind: payload.kind(),
            bytes: payload.encode(),
        }
    }

    pub fn payload(&self) -> Result<Payload> {
        let p = Payload::decode(&self.bytes, self.sender)?;
        if p.kind() != self.kind {
            return Err(Error::Payload(
                "envelope kind does not match payload".into(),
            ));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::INFINITE;

    fn conv() -> ConvergenceState {
        ConvergenceState {
            owner: 1,
            ready: vec![true, false, true],
            dist: vec![1, 0, INFINITE],
            switch_at: 42,
        }
    }

    #[test]
    fn trade_is_bit_exact() {
        let p = Payload::Trade {
            trade: 0.1 + 0.2,
            convergence: conv(),
        };
        let back = Payload::decode(&p.encode(), 1).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn estimate_round_trip() {
        let m = DMatrix::from_fn(3, 3, |r, c| {
            if r == c {
                0.0
            } else {
                1.0 / (1 + r + c) as f64
            }
        });
        let p = Payload::Estimate {
            matrix: m,
            convergence: conv(),
        };
        let env = MessageEnvelope::new(1, 2, 5, &p);
        assert_eq!(env.kind, PayloadKind::Estimate);
        assert_eq!(env.payload().unwrap(), p);
    }

    #[test]
    fn truncated_and_trailing_bytes_rejected() {
        let bytes = Payload::Trade {
            trade: 1.0,
            convergence: conv(),
        }
        .encode();
        assert!(Payload::decode(&bytes[..bytes.len() - 1], 1).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Payload::decode(&long, 1).is_err());
        let mut bad = bytes;
        bad[0] = 9;
        assert!(Payload::decode(&bad, 1).is_err());
    }
}
