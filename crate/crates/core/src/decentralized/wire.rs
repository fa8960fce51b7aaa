//! Payload encodings. Every payload starts with the sender's 32-byte
//! sortition proof for the round's role.

use crate::params::ParamVector;
use crate::NodeId;

use super::network::sha256;

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Some(head)
    }

    fn array32(&mut self) -> Option<[u8; 32]> {
        self.take(32).map(|b| b.try_into().expect("32 bytes"))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    fn vector(&mut self) -> Option<ParamVector> {
        let d = self.u32()? as usize;
        ParamVector::from_le_bytes(self.take(d.checked_mul(8)?)?)
    }

    fn done(&self) -> bool {
        self.bytes.is_empty()
    }
}

fn put_vector(out: &mut Vec<u8>, v: &ParamVector) {
    out.extend_from_slice(&(v.dim() as u32).to_be_bytes());
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn candidate_hash(v: &ParamVector) -> [u8; 32] {
    sha256(&v.to_le_bytes())
}

pub fn encode_proposal(proof: &[u8; 32], grad: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(36 + 8 * grad.dim());
    out.extend_from_slice(proof);
    put_vector(&mut out, grad);
    out
}

pub fn decode_proposal(bytes: &[u8]) -> Option<([u8; 32], ParamVector)> {
    let mut c = Cursor { bytes };
    let proof = c.array32()?;
    let v = c.vector()?;
    c.done().then_some((proof, v))
}

pub fn encode_ballot(proof: &[u8; 32], endorsed: &[NodeId]) -> Vec<u8> {
    let mut out = Vec::with_capacity(36 + 8 * endorsed.len());
    out.extend_from_slice(proof);
    out.extend_from_slice(&(endorsed.len() as u32).to_be_bytes());
    for &id in endorsed {
        out.extend_from_slice(&(id as u64).to_be_bytes());
    }
    out
}

pub fn decode_ballot(bytes: &[u8]) -> Option<([u8; 32], Vec<NodeId>)> {
    let mut c = Cursor { bytes };
    let proof = c.array32()?;
    let count = c.u32()? as usize;
    let ids = (0..count)
        .map(|_| c.u64().and_then(|v| usize::try_from(v).ok()))
        .collect::<Option<Vec<_>>>()?;
    c.done().then_some((proof, ids))
}

/// Consensus payload: proof, candidate hash, candidate vector and the
/// digests of the attached messages, in attachment order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusPayload {
    pub proof: [u8; 32],
    pub hash: [u8; 32],
    pub candidate: ParamVector,
    pub attachment_digests: Vec<[u8; 32]>,
}

pub fn encode_consensus(
    proof: &[u8; 32],
    candidate: &ParamVector,
    digests: &[[u8; 32]],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(72 + 8 * candidate.dim() + 32 * digests.len());
    out.extend_from_slice(proof);
    out.extend_from_slice(&candidate_hash(candidate));
    put_vector(&mut out, candidate);
    out.extend_from_slice(&(digests.len() as u32).to_be_bytes());
    for d in digests {
        out.extend_from_slice(d);
    }
    out
}

/// Rejects payloads whose stated hash does not match the candidate.
pub fn decode_consensus(bytes: &[u8]) -> Option<ConsensusPayload> {
    let mut c = Cursor { bytes };
    let proof = c.array32()?;
    let hash = c.array32()?;
    let candidate = c.vector()?;
    let count = c.u32()? as usize;
    let attachment_digests = (0..count)
        .map(|_| c.array32())
        .collect::<Option<Vec<_>>>()?;
    if !c.done() || candidate_hash(&candidate) != hash {
        return None;
    }
    Some(ConsensusPayload {
        proof,
        hash,
        candidate,
        attachment_digests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let proof = [7u8; 32];
        let g = ParamVector::new(vec![1.5, -0.0, f64::MIN_POSITIVE]);
        let (p, back) = decode_proposal(&encode_proposal(&proof, &g)).unwrap();
        assert_eq!(p, proof);
        assert!(back.bit_eq(&g));

        let (p, ids) = decode_ballot(&encode_ballot(&proof, &[4, 1, 9])).unwrap();
        assert_eq!(p, proof);
        assert_eq!(ids, vec![4, 1, 9]);

        let digests = [[1u8; 32], [2u8; 32]];
        let c = decode_consensus(&encode_consensus(&proof, &g, &digests)).unwrap();
        assert!(c.candidate.bit_eq(&g));
        assert_eq!(c.attachment_digests, digests.to_vec());
    }

    #[test]
    fn malformed_payloads() {
        let proof = [0u8; 32];
        let mut bytes = encode_proposal(&proof, &ParamVector::zeros(4));
        bytes.pop();
        assert!(decode_proposal(&bytes).is_none());
        let mut bytes = encode_ballot(&proof, &[1, 2]);
        bytes.push(0);
        assert!(decode_ballot(&bytes).is_none());
        let mut bytes = encode_consensus(&proof, &ParamVector::zeros(2), &[]);
        bytes[40] ^= 1;
        assert!(decode_consensus(&bytes).is_none());
        assert!(decode_proposal(&[]).is_none());
    }
}
