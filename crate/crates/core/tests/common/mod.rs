#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use blindfl::fhe::{Backend, FheParams, RoundId};
use blindfl::kd::{transition, Effect, EventKind, KdState, Party, Phase, RoundEvent};
use blindfl::model::{ModelParams, ParamMatrix, Role};
use blindfl::segmentation::{aggregate_encrypted, aggregate_plain, build_response, ClientResponse, RequestMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Random shapes for `m` matrices, alternating weight and bias roles.
pub fn random_shapes<R: Rng>(rng: &mut R, m: usize, max_len: usize) -> Vec<(Vec<usize>, Role)> {
    (0..m)
        .map(|j| {
            if j % 2 == 0 {
                let rows = rng.random_range(1..=8);
                let cols = rng.random_range(1..=(max_len / rows).max(1));
                (vec![rows, cols], Role::Weight)
            } else {
                (vec![rng.random_range(1..=16)], Role::Bias)
            }
        })
        .collect()
}

pub fn random_model<R: Rng>(rng: &mut R, shapes: &[(Vec<usize>, Role)]) -> ModelParams {
    let matrices = shapes
        .iter()
        .enumerate()
        .map(|(j, (shape, role))| {
            let n = shape.iter().product();
            let values = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
            ParamMatrix::new(j + 1, shape.clone(), values, *role).unwrap()
        })
        .collect();
    ModelParams::new(matrices).unwrap()
}

/// A request matrix plus the plaintext responses of `c` clients.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub request: RequestMatrix,
    pub locals: Vec<ModelParams>,
    pub responses: Vec<ClientResponse<ParamMatrix>>,
}

pub fn random_fixture<R: Rng>(rng: &mut R, m: usize, c: usize, p: usize, max_len: usize) -> Fixture {
    let shapes = random_shapes(rng, m, max_len);
    let request = RequestMatrix::generate(m, c, p, rng).unwrap();
    let locals: Vec<_> = (0..c).map(|_| random_model(rng, &shapes)).collect();
    let responses = locals
        .iter()
        .enumerate()
        .map(|(i, model)| build_response(i + 1, model, request.row(i + 1), rng.random_range(1..=500)).unwrap())
        .collect();
    Fixture {
        request,
        locals,
        responses,
    }
}

pub fn max_abs_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    assert!(a.compatible_with(b));
    a.matrices()
        .iter()
        .zip(b.matrices())
        .flat_map(|(x, y)| x.values().iter().zip(y.values()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Encrypts every response, aggregates homomorphically, decrypts, and
/// returns the max abs deviation from the plaintext aggregate.
pub fn encrypted_deviation(params: FheParams, fixture: &Fixture, seed: u64) -> f64 {
    let backend = Backend::new(params).unwrap();
    let mut rng = rng(seed);
    let keys = backend.keygen(&mut rng, RoundId(1)).unwrap();
    let encrypted: Vec<_> = fixture
        .responses
        .iter()
        .map(|r| ClientResponse {
            client: r.client,
            t: r.t,
            selected: r
                .selected
                .iter()
                .map(|(j, m)| (*j, backend.encrypt_matrix(&keys.public, m, &mut rng).unwrap()))
                .collect(),
        })
        .collect();
    let agg = aggregate_encrypted(&encrypted, &fixture.request, &keys.public, &backend).unwrap();
    let decrypted = ModelParams::new(
        agg.iter()
            .map(|em| backend.decrypt_matrix(&keys.secret, em).unwrap())
            .collect(),
    )
    .unwrap();
    let plain = aggregate_plain(&fixture.responses, &fixture.request).unwrap();
    max_abs_diff(&decrypted, &plain)
}

/// Ground truth tracked beside the key distributor's own state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct World {
    kd: KdState,
    submitted: BTreeSet<usize>,
    signaled: bool,
    releases: Vec<u8>,
}

#[derive(Debug, Default)]
pub struct KdSearch {
    pub states: usize,
    pub transitions: usize,
    pub rejected: usize,
    pub violations: Vec<String>,
    pub deadlocks: usize,
    /// Reachable states from which the final round can no longer complete.
    pub stuck: usize,
    pub completed_rounds: BTreeSet<u64>,
}

fn alphabet(c: usize, round: u64) -> Vec<RoundEvent> {
    let mut kinds = vec![
        EventKind::StartRound,
        EventKind::AggregationComplete(Party::Server),
        EventKind::ModelDistributed,
    ];
    for i in 0..=c + 1 {
        kinds.extend([
            EventKind::PublicKeyDelivered(i),
            EventKind::UpdateSubmitted(i),
            EventKind::AggregationComplete(Party::Client(i)),
            EventKind::PrivateKeyDelivered(i),
        ]);
    }
    let mut out = Vec::new();
    for r in [round.saturating_sub(1), round, round + 1] {
        out.extend(kinds.iter().map(|&k| RoundEvent::new(RoundId(r), k)));
    }
    out
}

/// Breadth-first search over every interleaving of key-distributor events,
/// legal or not, for `c` participants and `rounds` rounds.
pub fn explore_kd(c: usize, rounds: u64) -> KdSearch {
    let start = World {
        kd: KdState::new(c),
        submitted: BTreeSet::new(),
        signaled: false,
        releases: vec![0; c + 1],
    };
    let mut report = KdSearch::default();
    let mut index: HashMap<World, usize> = HashMap::new();
    let mut edges: Vec<Vec<usize>> = Vec::new();
    let mut worlds: Vec<World> = Vec::new();
    let mut queue = VecDeque::new();
    index.insert(start.clone(), 0);
    worlds.push(start.clone());
    edges.push(Vec::new());
    queue.push_back(0usize);
    while let Some(id) = queue.pop_front() {
        let w = worlds[id].clone();
        for ev in alphabet(c, w.kd.round.0) {
            if ev.kind == EventKind::StartRound && ev.round.0 > rounds {
                continue;
            }
            let Ok((kd, effect)) = transition(&w.kd, &ev) else {
                report.rejected += 1;
                continue;
            };
            report.transitions += 1;
            let mut next = World { kd, ..w.clone() };
            match ev.kind {
                EventKind::StartRound => {
                    next.submitted.clear();
                    next.signaled = false;
                    next.releases = vec![0; c + 1];
                }
                EventKind::UpdateSubmitted(i) => {
                    next.submitted.insert(i);
                }
                EventKind::AggregationComplete(Party::Server) => {
                    if next.submitted.len() != c {
                        report
                            .violations
                            .push(format!("server signal accepted with {} of {c} updates", next.submitted.len()));
                    }
                    next.signaled = true;
                }
                _ => {}
            }
            if let Effect::SendPrivateKey(i) = effect {
                if next.submitted.len() != c || !next.signaled {
                    report.violations.push(format!(
                        "round {}: key released to {i} after {} updates, signal = {}",
                        ev.round, next.submitted.len(), next.signaled
                    ));
                }
                next.releases[i] += 1;
                if next.releases[i] > 1 {
                    report.violations.push(format!("round {}: client {i} received the key twice", ev.round));
                }
            }
            if let Effect::Ignored = effect {
                if next != w {
                    report.violations.push("ignored event changed state".into());
                }
            }
            if next.kd.phase == Phase::RoundComplete && w.kd.phase != Phase::RoundComplete {
                if next.releases[1..].iter().any(|&r| r != 1) {
                    report
                        .violations
                        .push(format!("round {} completed with releases {:?}", ev.round, &next.releases[1..]));
                }
                report.completed_rounds.insert(ev.round.0);
            }
            let target = *index.entry(next.clone()).or_insert_with(|| {
                worlds.push(next);
                edges.push(Vec::new());
                queue.push_back(worlds.len() - 1);
                worlds.len() - 1
            });
            edges[id].push(target);
        }
    }
    report.states = worlds.len();
    let terminal = |w: &World| w.kd.phase == Phase::RoundComplete && w.kd.round.0 == rounds;
    report.deadlocks = worlds
        .iter()
        .enumerate()
        .filter(|(i, w)| edges[*i].is_empty() && !terminal(w))
        .count();
    let mut reverse = vec![Vec::new(); worlds.len()];
    for (from, targets) in edges.iter().enumerate() {
        for &to in targets {
            reverse[to].push(from);
        }
    }
    let mut live: HashSet<usize> = (0..worlds.len()).filter(|&i| terminal(&worlds[i])).collect();
    let mut queue: VecDeque<usize> = live.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        for &p in &reverse[n] {
            if live.insert(p) {
                queue.push_back(p);
            }
        }
    }
    report.stuck = worlds.len() - live.len();
    report
}

use blindfl::fhe::codec::{deserialize_ciphertext, serialize_ciphertext};
use blindfl::fhe::Plain;
use blindfl::runtime::wire::{decode_message, encode_message, read_frame, MessageKind, WireMessage, DEFAULT_FRAME_CAP};

/// Outcome counts of a codec fuzz run; every `*_accepted` and
/// `roundtrip_failures` must stay zero.
#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzTally {
    pub cases: usize,
    pub roundtrip_failures: usize,
    pub truncations: usize,
    pub truncation_accepted: usize,
    pub corruptions: usize,
    pub corruption_accepted: usize,
}

impl FuzzTally {
    pub fn clean(&self) -> bool {
        self.roundtrip_failures == 0 && self.truncation_accepted == 0 && self.corruption_accepted == 0
    }
}

fn damage<R: Rng>(
    rng: &mut R,
    bytes: &[u8],
    tally: &mut FuzzTally,
    accepts: impl Fn(&[u8]) -> bool,
) {
    let cut = rng.random_range(0..bytes.len());
    tally.truncations += 1;
    if accepts(&bytes[..cut]) {
        tally.truncation_accepted += 1;
    }
    let mut flipped = bytes.to_vec();
    let at = rng.random_range(0..bytes.len());
    flipped[at] ^= rng.random_range(1..=255u8);
    tally.corruptions += 1;
    if accepts(&flipped) {
        tally.corruption_accepted += 1;
    }
    let mut longer = bytes.to_vec();
    longer.push(rng.random());
    tally.corruptions += 1;
    if accepts(&longer) {
        tally.corruption_accepted += 1;
    }
}

pub fn fuzz_wire(cases: usize, seed: u64) -> FuzzTally {
    let mut rng = rng(seed);
    let mut tally = FuzzTally::default();
    for _ in 0..cases {
        let len = if rng.random_ratio(1, 20) {
            rng.random_range(0..8192)
        } else {
            rng.random_range(0..256)
        };
        let msg = WireMessage::new(
            MessageKind::ALL[rng.random_range(0..MessageKind::ALL.len())],
            RoundId(rng.random()),
            rng.random(),
            (0..len).map(|_| rng.random()).collect(),
        );
        let bytes = encode_message(&msg, DEFAULT_FRAME_CAP).unwrap();
        tally.cases += 1;
        let ok = match decode_message(&bytes, DEFAULT_FRAME_CAP) {
            Ok(back) => back == msg && encode_message(&back, DEFAULT_FRAME_CAP).unwrap() == bytes,
            Err(_) => false,
        };
        let streamed = read_frame(&mut &bytes[..], DEFAULT_FRAME_CAP).ok().flatten();
        if !ok || streamed.as_deref() != Some(&bytes[..]) {
            tally.roundtrip_failures += 1;
        }
        damage(&mut rng, &bytes, &mut tally, |b| decode_message(b, DEFAULT_FRAME_CAP).is_ok());
        let cut = rng.random_range(1..bytes.len());
        tally.truncations += 1;
        if read_frame(&mut &bytes[..cut], DEFAULT_FRAME_CAP).is_ok() {
            tally.truncation_accepted += 1;
        }
    }
    tally
}

/// Small-ring parameters that keep ciphertext fuzzing fast.
pub fn fuzz_params(scheme: blindfl::fhe::SchemeTag) -> FheParams {
    FheParams {
        ring_dim: 1 << 10,
        ..FheParams::test().with_scheme(scheme)
    }
}

pub fn fuzz_ciphertexts(cases: usize, seed: u64) -> FuzzTally {
    use blindfl::fhe::SchemeTag;
    let mut rng = rng(seed);
    let mut tally = FuzzTally::default();
    let backends = [
        Backend::new(fuzz_params(SchemeTag::Ckks)).unwrap(),
        Backend::new(fuzz_params(SchemeTag::Oracle)).unwrap(),
    ];
    let mut keys = Vec::new();
    for case in 0..cases {
        let backend = &backends[case % 2];
        if case % 200 < 2 {
            let round = RoundId(rng.random_range(1..1000));
            let pair = backend.keygen(&mut rng, round).unwrap();
            if keys.len() < 2 {
                keys.push(pair);
            } else {
                keys[case % 2] = pair;
            }
        }
        let pair = &keys[case % 2];
        let n = rng.random_range(1..=backend.slot_capacity());
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let mut ct = backend.encrypt_vector(&pair.public, &values, &mut rng).unwrap();
        for _ in 0..rng.random_range(0..=2) {
            ct = backend.mul_plain(&ct, &Plain::Scalar(rng.random_range(0.5..2.0))).unwrap();
        }
        let bytes = serialize_ciphertext(&ct);
        tally.cases += 1;
        let ok = match deserialize_ciphertext(&bytes) {
            Ok(back) => back == ct && serialize_ciphertext(&back) == bytes,
            Err(_) => false,
        };
        if !ok {
            tally.roundtrip_failures += 1;
        }
        damage(&mut rng, &bytes, &mut tally, |b| deserialize_ciphertext(b).is_ok());
    }
    tally
}
