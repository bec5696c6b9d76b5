//! Key distributor: issues one key pair per round and releases the private
//! key only after the server reports that aggregation is complete.
//!
//! The phase order is fixed:
//!
//! ```text
//! Idle -> KeysIssued -> CollectingUpdates -> AwaitingServerSignal
//!      -> PrivateKeyReleased -> RoundComplete -> (next round) KeysIssued
//! ```
//!
//! [`transition`] is the pure state function; [`KeyDistributor`] wraps it
//! with the key material and is driven one event at a time.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::fhe::{Backend, FheError, FheKeyPair, FheParams, PublicKey, RoundId, SecretKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KdError {
    #[error("illegal transition: {event:?} in phase {phase}")]
    IllegalTransition { phase: &'static str, event: EventKind },
    #[error("event for round {found} but the current round is {expected}")]
    RoundMismatch { expected: RoundId, found: RoundId },
    #[error("client {0} is not a participant of this round")]
    UnknownClient(usize),
    #[error("a round is already in progress")]
    RoundInProgress,
    #[error(transparent)]
    Fhe(#[from] FheError),
}

/// Who sent an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Party {
    Server,
    Client(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    StartRound,
    PublicKeyDelivered(usize),
    UpdateSubmitted(usize),
    AggregationComplete(Party),
    PrivateKeyDelivered(usize),
    ModelDistributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoundEvent {
    pub round: RoundId,
    pub kind: EventKind,
}

impl RoundEvent {
    pub fn new(round: RoundId, kind: EventKind) -> Self {
        Self { round, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Idle,
    KeysIssued { delivered: BTreeSet<usize> },
    CollectingUpdates { received: BTreeSet<usize> },
    AwaitingServerSignal,
    PrivateKeyReleased { delivered: BTreeSet<usize> },
    RoundComplete,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Idle => "Idle",
            Phase::KeysIssued { .. } => "KeysIssued",
            Phase::CollectingUpdates { .. } => "CollectingUpdates",
            Phase::AwaitingServerSignal => "AwaitingServerSignal",
            Phase::PrivateKeyReleased { .. } => "PrivateKeyReleased",
            Phase::RoundComplete => "RoundComplete",
        }
    }
}

/// Phase plus the round it belongs to and the number of participants `c`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KdState {
    pub phase: Phase,
    pub round: RoundId,
    pub participants: usize,
}

impl KdState {
    pub fn new(participants: usize) -> Self {
        Self {
            phase: Phase::Idle,
            round: RoundId(0),
            participants,
        }
    }
}

/// What a successful transition asks the caller to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    None,
    /// Generate and issue a fresh key pair.
    IssueKeys,
    /// Hand the public key to this client.
    SendPublicKey(usize),
    /// Hand the private key to this client.
    SendPrivateKey(usize),
    /// The event was a client attestation and was discarded.
    Ignored,
}

/// Pure transition function.
pub fn transition(state: &KdState, event: &RoundEvent) -> Result<(KdState, Effect), KdError> {
    let illegal = || KdError::IllegalTransition {
        phase: state.phase.name(),
        event: event.kind,
    };
    if event.kind == EventKind::StartRound {
        return match state.phase {
            Phase::Idle | Phase::RoundComplete if event.round > state.round => Ok((
                KdState {
                    phase: Phase::KeysIssued {
                        delivered: BTreeSet::new(),
                    },
                    round: event.round,
                    participants: state.participants,
                },
                Effect::IssueKeys,
            )),
            Phase::Idle | Phase::RoundComplete => Err(KdError::RoundMismatch {
                expected: RoundId(state.round.0 + 1),
                found: event.round,
            }),
            _ => Err(illegal()),
        };
    }
    if event.round != state.round {
        return Err(KdError::RoundMismatch {
            expected: state.round,
            found: event.round,
        });
    }
    let check_client = |i: usize| {
        if (1..=state.participants).contains(&i) {
            Ok(())
        } else {
            Err(KdError::UnknownClient(i))
        }
    };
    let next = |phase: Phase| KdState {
        phase,
        round: state.round,
        participants: state.participants,
    };
    let c = state.participants;
    match (&state.phase, event.kind) {
        (_, EventKind::AggregationComplete(Party::Client(_))) => Ok((state.clone(), Effect::Ignored)),
        (Phase::KeysIssued { delivered }, EventKind::PublicKeyDelivered(i)) => {
            check_client(i)?;
            if delivered.contains(&i) {
                return Err(illegal());
            }
            let mut delivered = delivered.clone();
            delivered.insert(i);
            let phase = if delivered.len() == c {
                Phase::CollectingUpdates {
                    received: BTreeSet::new(),
                }
            } else {
                Phase::KeysIssued { delivered }
            };
            Ok((next(phase), Effect::SendPublicKey(i)))
        }
        (Phase::CollectingUpdates { received }, EventKind::UpdateSubmitted(i)) => {
            check_client(i)?;
            if received.contains(&i) {
                return Err(illegal());
            }
            let mut received = received.clone();
            received.insert(i);
            let phase = if received.len() == c {
                Phase::AwaitingServerSignal
            } else {
                Phase::CollectingUpdates { received }
            };
            Ok((next(phase), Effect::None))
        }
        (Phase::AwaitingServerSignal, EventKind::AggregationComplete(Party::Server)) => Ok((
            next(Phase::PrivateKeyReleased {
                delivered: BTreeSet::new(),
            }),
            Effect::None,
        )),
        (Phase::CollectingUpdates { received }, EventKind::AggregationComplete(Party::Server)) if received.len() == c => {
            Ok((
                next(Phase::PrivateKeyReleased {
                    delivered: BTreeSet::new(),
                }),
                Effect::None,
            ))
        }
        (Phase::PrivateKeyReleased { delivered }, EventKind::PrivateKeyDelivered(i)) => {
            check_client(i)?;
            if delivered.contains(&i) {
                return Err(illegal());
            }
            let mut delivered = delivered.clone();
            delivered.insert(i);
            Ok((next(Phase::PrivateKeyReleased { delivered }), Effect::SendPrivateKey(i)))
        }
        (Phase::PrivateKeyReleased { delivered }, EventKind::ModelDistributed) if delivered.len() == c => {
            Ok((next(Phase::RoundComplete), Effect::None))
        }
        _ => Err(illegal()),
    }
}

/// The key distributor node: owns the current round's key pair.
///
/// All methods take `&mut self`, so events are applied one at a time; wrap
/// it in a mutex to accept events from several threads.
#[derive(Debug)]
pub struct KeyDistributor {
    backend: Backend,
    rng: ChaCha20Rng,
    state: KdState,
    keys: Option<FheKeyPair>,
}

impl KeyDistributor {
    pub fn new(params: FheParams, participants: usize, seed: u64) -> Result<Self, KdError> {
        Ok(Self {
            backend: Backend::new(params)?,
            rng: ChaCha20Rng::seed_from_u64(seed),
            state: KdState::new(participants),
            keys: None,
        })
    }

    pub fn state(&self) -> &KdState {
        &self.state
    }

    pub fn round(&self) -> RoundId {
        self.state.round
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    /// Starts the next round with a new key pair; the previous secret key
    /// is dropped.
    pub fn fresh_round(&mut self) -> Result<(RoundId, PublicKey), KdError> {
        if !matches!(self.state.phase, Phase::Idle | Phase::RoundComplete) {
            return Err(KdError::RoundInProgress);
        }
        let round = RoundId(self.state.round.0 + 1);
        self.handle_event(RoundEvent::new(round, EventKind::StartRound))?;
        let pk = self.keys.as_ref().expect("keys issued").public.clone();
        Ok((round, pk))
    }

    /// Applies one event. Returns the key material the event releases, if
    /// any.
    pub fn handle_event(&mut self, event: RoundEvent) -> Result<Released, KdError> {
        let (state, effect) = transition(&self.state, &event)?;
        let released = match effect {
            Effect::IssueKeys => {
                self.keys = Some(self.backend.keygen(&mut self.rng, event.round)?);
                Released::Nothing
            }
            Effect::SendPublicKey(_) => Released::Public(self.keys.as_ref().expect("keys").public.clone()),
            Effect::SendPrivateKey(_) => Released::Secret(self.keys.as_ref().expect("keys").secret.clone()),
            Effect::None | Effect::Ignored => Released::Nothing,
        };
        if state.phase == Phase::RoundComplete {
            self.keys = None;
        }
        self.state = state;
        Ok(released)
    }

    pub fn deliver_public_key(&mut self, client: usize) -> Result<PublicKey, KdError> {
        match self.handle_event(RoundEvent::new(self.round(), EventKind::PublicKeyDelivered(client)))? {
            Released::Public(pk) => Ok(pk),
            _ => unreachable!("public key delivery releases the public key"),
        }
    }

    pub fn deliver_private_key(&mut self, client: usize) -> Result<SecretKey, KdError> {
        match self.handle_event(RoundEvent::new(self.round(), EventKind::PrivateKeyDelivered(client)))? {
            Released::Secret(sk) => Ok(sk),
            _ => unreachable!("private key delivery releases the secret key"),
        }
    }
}

/// Key material handed out by [`KeyDistributor::handle_event`].
#[derive(Debug, Clone, PartialEq)]
pub enum Released {
    Nothing,
    Public(PublicKey),
    Secret(SecretKey),
}
