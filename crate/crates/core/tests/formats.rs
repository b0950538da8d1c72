//! Binary and text formats: byte-exact round trips and corruption reports.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_codes;
use zsih::data::features::{class_names_to_text, parse_class_names};
use zsih::data::semantics::{parse_synonyms, resolve_semantics};
use zsih::data::{
    load_features, write_features, FeatureItem, FeatureSet, Modality, SemanticTable, ZeroShotSplit,
};
use zsih::pipeline::{load_checkpoint, write_checkpoint, Checkpoint, ModelParams, ZsihConfig};
use zsih::retrieval::{load_codes, write_codes, CodeMatrix};
use zsih::objective::AdamState;
use zsih::Error;

/// Offset of the item count in a feature file header.
const FEATURE_N_OFFSET: usize = 15;
/// Offset of the code count in a code file header.
const CODE_N_OFFSET: usize = 6;

fn modality() -> impl Strategy<Value = Modality> {
    prop_oneof![Just(Modality::Sketch), Just(Modality::Image)]
}

fn feature_set() -> impl Strategy<Value = FeatureSet> {
    (modality(), 1usize..4, 1usize..6).prop_flat_map(|(m, l, c)| {
        prop::collection::vec(
            (any::<u64>(), any::<u32>(), prop::collection::vec(any::<f32>(), l * c)),
            0..12,
        )
        .prop_map(move |items| FeatureSet {
            modality: m,
            locations: l,
            channels: c,
            items: items
                .into_iter()
                .map(|(id, class, data)| FeatureItem { id, class, data })
                .collect(),
        })
    })
}

fn small_features(n: usize) -> FeatureSet {
    let mut set = FeatureSet::new(Modality::Sketch, 2, 3);
    for i in 0..n {
        set.push(FeatureItem {
            id: i as u64,
            class: (i % 3) as u32,
            data: (0..6).map(|k| (i * 6 + k) as f32 * 0.5).collect(),
        })
        .unwrap();
    }
    set
}

fn record_of(e: &Error) -> Option<usize> {
    match e {
        Error::Format { record, .. } => *record,
        _ => None,
    }
}

proptest! {
    #[test]
    fn features_round_trip(set in feature_set()) {
        let bytes = set.to_bytes();
        let back = FeatureSet::read_from(&bytes[..]).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.items.len(), set.items.len());
    }

    #[test]
    fn codes_round_trip(bits in 1usize..200, n in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = random_codes(&mut rng, n, bits, 1000, Modality::Image);
        let bytes = codes.to_bytes();
        prop_assert_eq!(bytes.len(), 19 + n * (4 + bits.div_ceil(8)) + 4 * n);
        let back = CodeMatrix::read_from(&bytes[..]).unwrap();
        prop_assert_eq!(&back, &codes);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn semantics_text_round_trip(
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..10),
    ) {
        let mut table = SemanticTable::new(3);
        let mut names = BTreeMap::new();
        for (i, v) in rows.iter().enumerate() {
            names.insert(i as u32, format!("class{i}"));
            table.insert(i as u32, v.clone()).unwrap();
        }
        let text = table.to_text(&names).unwrap();
        let back = resolve_semantics(&text, &names, &parse_synonyms("").unwrap()).unwrap();
        prop_assert_eq!(&back, &table);
        prop_assert_eq!(back.to_text(&names).unwrap(), text);
    }

    #[test]
    fn split_text_round_trip(
        seen in prop::collection::btree_set(0u32..50, 1..10),
        unseen in prop::collection::btree_set(50u32..100, 1..10),
        seed in any::<u64>(),
    ) {
        let split = ZeroShotSplit { seen, unseen, seed };
        prop_assert_eq!(ZeroShotSplit::parse_text(&split.to_text()).unwrap(), split);
    }

    #[test]
    fn class_names_round_trip(
        names in prop::collection::btree_map(any::<u32>(), "[a-z][a-z_]{0,12}", 0..10),
    ) {
        let text = class_names_to_text(&names);
        prop_assert_eq!(parse_class_names(&text).unwrap(), names);
    }
}

#[test]
fn feature_count_larger_than_records_names_the_missing_record() {
    let mut bytes = small_features(3).to_bytes();
    bytes[FEATURE_N_OFFSET..FEATURE_N_OFFSET + 8].copy_from_slice(&5u64.to_le_bytes());
    let e = FeatureSet::read_from(&bytes[..]).unwrap_err();
    assert_eq!(record_of(&e), Some(3), "{e}");
    assert!(e.to_string().contains("record 3"), "{e}");
}

#[test]
fn feature_count_smaller_than_records_is_trailing_data() {
    let mut bytes = small_features(3).to_bytes();
    bytes[FEATURE_N_OFFSET..FEATURE_N_OFFSET + 8].copy_from_slice(&2u64.to_le_bytes());
    let e = FeatureSet::read_from(&bytes[..]).unwrap_err();
    assert!(e.to_string().contains("trailing"), "{e}");
}

#[test]
fn truncated_feature_file_names_the_record() {
    let bytes = small_features(4).to_bytes();
    let e = FeatureSet::read_from(&bytes[..bytes.len() - 3]).unwrap_err();
    assert_eq!(record_of(&e), Some(3), "{e}");
}

#[test]
fn bad_magic_version_and_modality() {
    let good = small_features(1).to_bytes();
    let mut b = good.clone();
    b[0] = b'X';
    assert!(FeatureSet::read_from(&b[..]).unwrap_err().to_string().contains("magic"));
    let mut b = good.clone();
    b[4] = 99;
    assert!(FeatureSet::read_from(&b[..]).unwrap_err().to_string().contains("version"));
    let mut b = good;
    b[6] = 7;
    assert!(FeatureSet::read_from(&b[..]).unwrap_err().to_string().contains("modality"));
}

#[test]
fn code_file_corruptions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let codes = random_codes(&mut rng, 4, 13, 5, Modality::Sketch);
    let good = codes.to_bytes();

    let mut b = good.clone();
    b[CODE_N_OFFSET..CODE_N_OFFSET + 8].copy_from_slice(&6u64.to_le_bytes());
    let e = CodeMatrix::read_from(&b[..]).unwrap_err();
    assert!(matches!(e, Error::Format { record: Some(_), .. }), "{e}");

    // Set a padding bit in record 2: bits 13..16 of the second code byte.
    let record = 19 + 2 * (4 + 2);
    let mut b = good.clone();
    b[record + 4 + 1] |= 0x80;
    let e = CodeMatrix::read_from(&b[..]).unwrap_err();
    assert_eq!(record_of(&e), Some(2), "{e}");
    assert!(e.to_string().contains("padding"), "{e}");

    let mut b = good.clone();
    let trailer = b.len() - 4;
    b[trailer] ^= 1;
    let e = CodeMatrix::read_from(&b[..]).unwrap_err();
    assert_eq!(record_of(&e), Some(3), "{e}");
}

fn sample_checkpoint(seed: u64) -> Checkpoint {
    let config = ZsihConfig {
        sketch_channels: 4,
        image_channels: 5,
        semantic_dim: 3,
        feature_dim: 3,
        gcn_hidden: 6,
        code_bits: 7,
        seed,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    let adam = AdamState::new(&params, config.lr, config.beta1, config.beta2, config.eps_hat);
    Checkpoint {
        config,
        params,
        adam,
        iteration: 17,
        rng,
    }
}

#[test]
fn checkpoint_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.zsck");
    let ckpt = sample_checkpoint(9);
    write_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected_at_every_length() {
    let bytes = sample_checkpoint(3).to_bytes();
    for cut in (0..bytes.len()).step_by(37) {
        assert!(Checkpoint::read_from(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::read_from(&extra[..]).is_err());
}

#[test]
fn feature_and_code_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let set = small_features(5);
    let fpath = dir.path().join("f.zsft");
    write_features(&fpath, &set).unwrap();
    assert_eq!(load_features(&fpath).unwrap(), set);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let codes = random_codes(&mut rng, 6, 70, 3, Modality::Image);
    let cpath = dir.path().join("c.zscb");
    write_codes(&cpath, &codes).unwrap();
    assert_eq!(load_codes(&cpath).unwrap(), codes);
    let header = std::fs::read(&cpath).unwrap();
    assert_eq!(&header[..4], b"ZSCB");
    assert_eq!(u32::from_le_bytes(header[14..18].try_into().unwrap()), 70);
}

#[test]
fn semantics_resolve_through_synonyms_and_report_missing() {
    let names: BTreeMap<u32, String> =
        [(0, "cat".to_string()), (1, "sea_turtle".to_string())].into();
    let text = "cat 1 2\nturtle 3 4\n";
    let syn = parse_synonyms("sea_turtle\tturtle\n").unwrap();
    let t = resolve_semantics(text, &names, &syn).unwrap();
    assert_eq!(t.get(1), Some(&[3.0, 4.0][..]));
    let e = resolve_semantics(text, &names, &Default::default()).unwrap_err();
    assert!(e.to_string().contains("sea_turtle"), "{e}");
}

#[test]
fn overlapping_split_is_leakage() {
    let split = ZeroShotSplit {
        seen: BTreeSet::from([1, 2, 3]),
        unseen: BTreeSet::from([3, 4]),
        seed: 0,
    };
    assert!(matches!(split.validate(), Err(Error::Leakage(c)) if c == vec![3]));
}
