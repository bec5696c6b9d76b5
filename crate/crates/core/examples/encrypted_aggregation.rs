//! Encrypts three clients' segmented models under CKKS, aggregates them on
//! ciphertexts, and compares the decrypted result with plaintext FedAvg.

use blindfl::fhe::{Backend, FheParams, RoundId};
use blindfl::segmentation::{aggregate_encrypted, aggregate_plain, build_response, ClientResponse, RequestMatrix};
use blindfl::training::{Activation, MlpSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let spec = MlpSpec::new(vec![64, 32, 10], Activation::Relu).unwrap();
    let backend = Backend::new(FheParams::test()).unwrap();
    let keys = backend.keygen(&mut rng, RoundId(1)).unwrap();

    let c = 3;
    let request = RequestMatrix::generate(spec.matrix_count(), c, 2, &mut rng).unwrap();
    let plain: Vec<_> = (1..=c)
        .map(|i| build_response(i, &spec.init(&mut rng), request.row(i), 100 * i as u64).unwrap())
        .collect();
    let encrypted: Vec<_> = plain
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

    let aggregated = aggregate_encrypted(&encrypted, &request, &keys.public, &backend).unwrap();
    let reference = aggregate_plain(&plain, &request).unwrap();
    for (em, want) in aggregated.iter().zip(reference.matrices()) {
        let got = backend.decrypt_matrix(&keys.secret, em).unwrap();
        let err = got.values().iter().zip(want.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!(
            "matrix {} {:?}: {} chunk(s), level {}, contributors {:?}, max error {err:.2e}",
            em.index,
            em.shape,
            em.chunks.len(),
            em.chunks[0].level(),
            request.contributors(em.index)
        );
    }
}
