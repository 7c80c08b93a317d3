//! Range coder round trips, length bounds, and malformed-stream detection.

use nzip::coder::{decode_symbols, encode_symbols};
use nzip::entropy::{
    build_cdf_tables, CdfTable, ElementCdf, GaussianParams, DEFAULT_PRECISION, DEFAULT_TAIL_MASS,
};
use nzip::NzipError;
use nzip_tensor::Tensor;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn gaussian_table(mu: &[f64], sigma: &[f64]) -> CdfTable {
    let n = mu.len();
    let p = GaussianParams::new(
        Tensor::constant(mu.to_vec(), &[n]).unwrap(),
        Tensor::constant(sigma.to_vec(), &[n]).unwrap(),
    )
    .unwrap();
    build_cdf_tables(&p, DEFAULT_PRECISION, DEFAULT_TAIL_MASS).unwrap()
}

/// Builds a table row directly from raw counts (must sum to 2^precision).
fn row_from_counts(lo: i32, counts: &[u32], precision: u32) -> ElementCdf {
    let mut cdf = Vec::with_capacity(counts.len() + 1);
    let mut acc = 0u64;
    cdf.push(0);
    for &c in counts {
        acc += c as u64;
        cdf.push(acc as u32);
    }
    assert_eq!(acc, 1u64 << precision, "counts must fill the precision budget");
    ElementCdf { lo, cdf }
}

fn random_table(rng: &mut StdRng, n: usize, precision: u32) -> CdfTable {
    let total = 1u64 << precision;
    let rows = (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=24usize);
            // random positive counts, then largest-bucket absorption of the slack
            let mut counts: Vec<u64> = (0..k).map(|_| rng.gen_range(1..=1024u64)).collect();
            let sum: u64 = counts.iter().sum();
            let mut scaled: Vec<u64> =
                counts.iter().map(|&c| (c * total / sum).max(1)).collect();
            let err = scaled.iter().sum::<u64>() as i64 - total as i64;
            let big = (0..k).max_by_key(|&i| scaled[i]).unwrap();
            scaled[big] = (scaled[big] as i64 - err) as u64;
            counts = scaled;
            let lo = rng.gen_range(-100..100i32);
            row_from_counts(lo, &counts.iter().map(|&c| c as u32).collect::<Vec<_>>(), precision)
        })
        .collect();
    CdfTable { precision, rows }
}

fn random_symbols(rng: &mut StdRng, table: &CdfTable) -> Vec<i32> {
    table
        .rows
        .iter()
        .map(|row| rng.gen_range(row.lo..=row.hi()))
        .collect()
}

#[test]
fn round_trips_under_random_tables() {
    let mut rng = StdRng::seed_from_u64(11);
    for trial in 0..300 {
        let precision = *[8u32, 12, 16, 24].iter().nth(trial % 4).unwrap();
        let n = rng.gen_range(0..=64usize);
        let table = random_table(&mut rng, n, precision);
        let symbols = random_symbols(&mut rng, &table);
        let bytes = encode_symbols(&symbols, &table).unwrap();
        let decoded = decode_symbols(&bytes, &table).unwrap();
        assert_eq!(decoded, symbols, "trial {trial} mismatched");
    }
}

#[test]
fn round_trips_under_gaussian_tables() {
    let mut rng = StdRng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.gen_range(1..=128usize);
        let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..8.0)).collect();
        let table = gaussian_table(&mu, &sigma);
        let symbols = random_symbols(&mut rng, &table);
        let bytes = encode_symbols(&symbols, &table).unwrap();
        assert_eq!(decode_symbols(&bytes, &table).unwrap(), symbols);
    }
}

#[test]
fn worked_symbol_round_trips() {
    // the unit-σ table centred on 4 spans [0, 8]; 3 sits one left of centre
    let table = gaussian_table(&[4.0], &[1.0]);
    assert_eq!(table.rows[0].lo, 0);
    assert_eq!(table.rows[0].hi(), 8);
    let bytes = encode_symbols(&[3], &table).unwrap();
    assert_eq!(decode_symbols(&bytes, &table).unwrap(), vec![3]);
}

#[test]
fn empty_sequence_is_a_single_flush_byte() {
    let table = CdfTable { precision: DEFAULT_PRECISION, rows: vec![] };
    let bytes = encode_symbols(&[], &table).unwrap();
    assert_eq!(bytes.len(), 1);
    assert_eq!(decode_symbols(&bytes, &table).unwrap(), Vec::<i32>::new());
}

#[test]
fn near_certain_symbol_codes_in_at_most_two_bytes() {
    let precision = DEFAULT_PRECISION;
    let total = 1u32 << precision;
    let k = 5u32;
    let mut counts = vec![1u32; k as usize];
    counts[2] = total - (k - 1);
    let row = row_from_counts(-2, &counts, precision);
    let table = CdfTable { precision, rows: vec![row] };
    let bytes = encode_symbols(&[0], &table).unwrap();
    assert!(bytes.len() <= 2, "near-certain symbol took {} bytes", bytes.len());
    assert_eq!(decode_symbols(&bytes, &table).unwrap(), vec![0]);
}

#[test]
fn uniform_symbols_cost_eight_bits_each() {
    let precision = DEFAULT_PRECISION;
    let total = 1u32 << precision;
    let counts = vec![total / 256; 256];
    let rows: Vec<ElementCdf> =
        (0..4096).map(|_| row_from_counts(0, &counts, precision)).collect();
    let table = CdfTable { precision, rows };
    let mut rng = StdRng::seed_from_u64(13);
    let symbols: Vec<i32> = (0..4096).map(|_| rng.gen_range(0..256)).collect();
    let bytes = encode_symbols(&symbols, &table).unwrap();
    let diff = bytes.len() as i64 - 4096;
    assert!(diff.abs() <= 16, "expected about 4096 bytes, got {}", bytes.len());
    assert_eq!(decode_symbols(&bytes, &table).unwrap(), symbols);
}

#[test]
fn degenerate_single_symbol_rows_add_no_payload() {
    let precision = DEFAULT_PRECISION;
    let total = 1u32 << precision;
    let rows: Vec<ElementCdf> =
        (0..1000).map(|i| row_from_counts(i, &[total], precision)).collect();
    let table = CdfTable { precision, rows };
    let symbols: Vec<i32> = (0..1000).collect();
    let bytes = encode_symbols(&symbols, &table).unwrap();
    assert_eq!(bytes.len(), 1, "certain symbols must not grow the stream");
    assert_eq!(decode_symbols(&bytes, &table).unwrap(), symbols);
}

#[test]
fn payload_stays_within_the_tightness_bound() {
    let mut rng = StdRng::seed_from_u64(14);
    for _ in 0..20 {
        let n = rng.gen_range(200..2000usize);
        let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..6.0)).collect();
        let table = gaussian_table(&mu, &sigma);
        let symbols = random_symbols(&mut rng, &table);
        let bytes = encode_symbols(&symbols, &table).unwrap();
        let ideal = table.table_bits(&symbols).unwrap();
        let actual = 8.0 * bytes.len() as f64;
        let bound = ideal + 0.02 * n as f64 + 128.0;
        assert!(
            actual <= bound,
            "{actual} coded bits exceed {ideal} table bits + slack {bound}"
        );
    }
}

#[test]
fn encoding_is_deterministic() {
    let mut rng = StdRng::seed_from_u64(15);
    let table = random_table(&mut rng, 64, 16);
    let symbols = random_symbols(&mut rng, &table);
    let a = encode_symbols(&symbols, &table).unwrap();
    let b = encode_symbols(&symbols, &table).unwrap();
    assert_eq!(a, b);
}

#[test]
fn out_of_window_symbol_is_a_contract_error() {
    let table = gaussian_table(&[0.0], &[1.0]);
    let bad = table.rows[0].hi() + 1;
    match encode_symbols(&[bad], &table) {
        Err(NzipError::Contract(_)) => {}
        other => panic!("expected contract violation, got {other:?}"),
    }
}

#[test]
fn length_mismatch_is_rejected() {
    let table = gaussian_table(&[0.0, 1.0], &[1.0, 1.0]);
    assert!(encode_symbols(&[0], &table).is_err());
}

#[test]
fn truncated_stream_is_detected() {
    let mut rng = StdRng::seed_from_u64(16);
    let mut caught = 0;
    for _ in 0..50 {
        let table = random_table(&mut rng, 400, 16);
        let symbols = random_symbols(&mut rng, &table);
        let mut bytes = encode_symbols(&symbols, &table).unwrap();
        bytes.truncate(bytes.len().saturating_sub(2));
        match decode_symbols(&bytes, &table) {
            Err(NzipError::Truncated(_)) => caught += 1,
            Ok(decoded) => assert_ne!(
                decoded, symbols,
                "truncated stream silently decoded to the original"
            ),
            Err(_) => caught += 1,
        }
    }
    assert!(caught >= 45, "only {caught}/50 truncations were flagged");
}

#[test]
fn trailing_garbage_is_detected() {
    let mut rng = StdRng::seed_from_u64(17);
    let table = random_table(&mut rng, 200, 16);
    let symbols = random_symbols(&mut rng, &table);
    let mut bytes = encode_symbols(&symbols, &table).unwrap();
    bytes.extend_from_slice(&[0xAB, 0xCD]);
    match decode_symbols(&bytes, &table) {
        Err(NzipError::Truncated(_)) => {}
        other => panic!("expected a stream-length error, got {other:?}"),
    }
}

#[test]
fn corrupted_byte_never_panics() {
    let mut rng = StdRng::seed_from_u64(18);
    for _ in 0..50 {
        let table = random_table(&mut rng, 100, 16);
        let symbols = random_symbols(&mut rng, &table);
        let mut bytes = encode_symbols(&symbols, &table).unwrap();
        let idx = rng.gen_range(0..bytes.len());
        bytes[idx] ^= 1 << rng.gen_range(0..8);
        // decoding may error or produce different symbols, but must return
        let _ = decode_symbols(&bytes, &table);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_property(
        seed in any::<u64>(),
        n in 0usize..48,
        precision in 8u32..=24,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let table = random_table(&mut rng, n, precision);
        let symbols = random_symbols(&mut rng, &table);
        let bytes = encode_symbols(&symbols, &table).unwrap();
        prop_assert_eq!(decode_symbols(&bytes, &table).unwrap(), symbols);
    }
}
