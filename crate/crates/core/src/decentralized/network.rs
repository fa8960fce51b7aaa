//! Simulated synchronous broadcast network with authenticated messages.

use std::fmt;
use std::sync::{Arc, OnceLock};

use sha2::{Digest, Sha256};

use super::{DecentralizedError, NodeState};
use crate::committee::{KeyRegistry, SecretKey};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoundTag {
    Proposal,
    Vote,
    Consensus,
}

impl RoundTag {
    pub fn byte(self) -> u8 {
        match self {
            Self::Proposal => 0,
            Self::Vote => 1,
            Self::Consensus => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Proposal => "proposal",
            Self::Vote => "vote",
            Self::Consensus => "consensus",
        }
    }
}

pub(crate) fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// A signed message. The tag covers `(sender, epoch, round, SHA-256(payload))`;
/// attachments are carried alongside and are bound to the payload by the
/// digests it lists.
#[derive(Clone)]
pub struct NetMessage {
    pub sender: NodeId,
    pub epoch: u64,
    pub round: RoundTag,
    payload: Arc<[u8]>,
    pub auth_tag: [u8; 32],
    attachments: Vec<Arc<NetMessage>>,
    digest: OnceLock<[u8; 32]>,
}

impl fmt::Debug for NetMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetMessage")
            .field("sender", &self.sender)
            .field("epoch", &self.epoch)
            .field("round", &self.round)
            .field("payload_len", &self.payload.len())
            .field("attachments", &self.attachments.len())
            .finish()
    }
}

fn auth_parts<'a>(
    sender: &'a [u8; 8],
    epoch: &'a [u8; 8],
    round: &'a [u8; 1],
    digest: &'a [u8; 32],
) -> [&'a [u8]; 4] {
    [sender, epoch, round, digest]
}

impl NetMessage {
    pub fn sign(
        sender: NodeId,
        epoch: u64,
        round: RoundTag,
        payload: Vec<u8>,
        key: &SecretKey,
    ) -> Self {
        Self::sign_with(sender, epoch, round, payload, Vec::new(), key)
    }

    pub fn sign_with(
        sender: NodeId,
        epoch: u64,
        round: RoundTag,
        payload: Vec<u8>,
        attachments: Vec<Arc<NetMessage>>,
        key: &SecretKey,
    ) -> Self {
        let digest = sha256(&payload);
        let s = (sender as u64).to_be_bytes();
        let e = epoch.to_be_bytes();
        let r = [round.byte()];
        let auth_tag = key.mac(&auth_parts(&s, &e, &r, &digest));
        let cell = OnceLock::new();
        cell.set(digest).expect("fresh cell");
        Self {
            sender,
            epoch,
            round,
            payload: payload.into(),
            auth_tag,
            attachments,
            digest: cell,
        }
    }

    /// A message with an arbitrary tag, e.g. one claiming another sender.
    pub fn unsigned(
        sender: NodeId,
        epoch: u64,
        round: RoundTag,
        payload: Vec<u8>,
        auth_tag: [u8; 32],
    ) -> Self {
        Self {
            sender,
            epoch,
            round,
            payload: payload.into(),
            auth_tag,
            attachments: Vec::new(),
            digest: OnceLock::new(),
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn attachments(&self) -> &[Arc<NetMessage>] {
        &self.attachments
    }

    /// SHA-256 of the payload, computed once per message.
    pub fn digest(&self) -> [u8; 32] {
        *self.digest.get_or_init(|| sha256(&self.payload))
    }

    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        let digest = self.digest();
        let s = (self.sender as u64).to_be_bytes();
        let e = self.epoch.to_be_bytes();
        let r = [self.round.byte()];
        registry.verify(
            self.sender,
            &auth_parts(&s, &e, &r, &digest),
            &self.auth_tag,
        )
    }
}

/// Delivery layer: every broadcast reaches every node, Byzantine senders may
/// hand each recipient a different variant.
#[derive(Debug)]
pub struct Network {
    registry: KeyRegistry,
    sent: u64,
    trace: Option<Vec<String>>,
}

impl Network {
    pub fn new(registry: KeyRegistry, trace: bool) -> Self {
        Self {
            registry,
            sent: 0,
            trace: trace.then(Vec::new),
        }
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    pub fn n(&self) -> usize {
        self.registry.len()
    }

    pub fn messages_sent(&self) -> u64 {
        self.sent
    }

    /// One line per distinct message: `epoch round sender recipients hash`.
    pub fn trace(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Deliver the same message to every node. Returns the delivery count.
    pub fn broadcast(
        &mut self,
        nodes: &mut [NodeState],
        msg: NetMessage,
    ) -> Result<usize, DecentralizedError> {
        let msg = Arc::new(msg);
        self.broadcast_each(nodes, msg.sender, |_| Arc::clone(&msg))
    }

    /// Deliver `variant(recipient)` to each node; every variant must name
    /// `sender`.
    pub fn broadcast_each(
        &mut self,
        nodes: &mut [NodeState],
        sender: NodeId,
        mut variant: impl FnMut(NodeId) -> Arc<NetMessage>,
    ) -> Result<usize, DecentralizedError> {
        if !self.registry.contains(sender) {
            return Err(DecentralizedError::UnregisteredSender(sender));
        }
        let mut lines: Vec<(Arc<NetMessage>, usize)> = Vec::new();
        for node in nodes.iter_mut() {
            let msg = variant(node.id);
            if msg.sender != sender {
                return Err(DecentralizedError::SenderMismatch {
                    declared: sender,
                    found: msg.sender,
                });
            }
            if self.trace.is_some() {
                match lines.iter_mut().find(|(m, _)| Arc::ptr_eq(m, &msg)) {
                    Some((_, count)) => *count += 1,
                    None => lines.push((Arc::clone(&msg), 1)),
                }
            }
            node.inbox.push(msg);
        }
        self.sent += nodes.len() as u64;
        if let Some(trace) = &mut self.trace {
            for (m, count) in lines {
                trace.push(format!(
                    "{} {} {} {} {}",
                    m.epoch,
                    m.round.name(),
                    m.sender,
                    count,
                    hex_prefix(&m.digest())
                ));
            }
        }
        Ok(nodes.len())
    }
}

fn hex_prefix(d: &[u8; 32]) -> String {
    d[..4].iter().map(|b| format!("{b:02x}")).collect()
}
