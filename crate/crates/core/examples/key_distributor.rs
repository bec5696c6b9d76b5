//! Walks the key distributor through one round and shows that the private
//! key stays locked until every update is in and the server signals.

use blindfl::fhe::FheParams;
use blindfl::kd::{EventKind, KeyDistributor, Party, RoundEvent};

fn main() {
    let c = 3;
    let mut kd = KeyDistributor::new(FheParams::oracle(), c, 1).unwrap();
    let (round, pk) = kd.fresh_round().unwrap();
    println!("{round}: issued key {:016x}", pk.key_id());
    for i in 1..=c {
        kd.deliver_public_key(i).unwrap();
    }
    println!("phase after key delivery: {}", kd.state().phase.name());

    for i in 1..=c {
        if let Err(e) = kd.deliver_private_key(i) {
            println!("early private key request from client {i}: {e}");
        }
        kd.handle_event(RoundEvent::new(round, EventKind::UpdateSubmitted(i))).unwrap();
    }
    let forged = kd.handle_event(RoundEvent::new(round, EventKind::AggregationComplete(Party::Client(1))));
    println!("client-sent completion signal: {forged:?}, phase {}", kd.state().phase.name());

    kd.handle_event(RoundEvent::new(round, EventKind::AggregationComplete(Party::Server))).unwrap();
    for i in 1..=c {
        let sk = kd.deliver_private_key(i).unwrap();
        println!("client {i} received private key {:016x}", sk.key_id());
    }
    if let Err(e) = kd.deliver_private_key(1) {
        println!("second request from client 1: {e}");
    }
    kd.handle_event(RoundEvent::new(round, EventKind::ModelDistributed)).unwrap();
    println!("phase: {}", kd.state().phase.name());
}
