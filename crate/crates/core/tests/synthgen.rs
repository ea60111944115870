use std::collections::BTreeSet;

use omreid::dataset::{self, modality_counts, Payload};
use omreid::synthgen::{self, attribute_regions, generate, identities, split_identities, Attributes, SynthConfig, ViewParams};
use omreid::Modality;

fn rgb_diff(a: &Attributes, b: &Attributes) -> Vec<(usize, usize)> {
    let vp = ViewParams::draw(9, 3, Modality::Rgb, 1);
    let x = synthgen::render_rgb(a, &vp, 32, 16);
    let y = synthgen::render_rgb(b, &vp, 32, 16);
    let mut out = Vec::new();
    for r in 0..32 {
        for c in 0..16 {
            if x.pixel(r, c) != y.pixel(r, c) {
                out.push((r, c));
            }
        }
    }
    out
}

#[test]
fn single_attribute_changes_stay_in_their_region() {
    let base = identities(1, 5)[0].attributes;
    let mut variants: Vec<(&str, Attributes)> = vec![
        ("top_hue", Attributes { top_hue: (base.top_hue + 1) % 8, ..base }),
        ("bottom_hue", Attributes { bottom_hue: (base.bottom_hue + 3) % 8, ..base }),
        ("shoe_hue", Attributes { shoe_hue: (base.shoe_hue + 1) % 4, ..base }),
        ("build", Attributes { build: (base.build + 1) % 3, ..base }),
        ("bag", Attributes { bag: !base.bag, ..base }),
        ("hat", Attributes { hat: !base.hat, ..base }),
        ("striped", Attributes { striped: !base.striped, ..base }),
    ];
    // Hair is only visible under no hat.
    let bare = Attributes { hat: false, ..base };
    variants.push(("hair_hue", Attributes { hair_hue: (base.hair_hue + 1) % 4, ..bare }));
    for (name, changed) in variants {
        let reference = if name == "hair_hue" { bare } else { base };
        let diff = rgb_diff(&reference, &changed);
        assert!(!diff.is_empty(), "{name} changed nothing");
        let regions = attribute_regions(name);
        for (r, c) in diff {
            assert!(regions.iter().any(|g| g.contains(r, c)), "{name} changed pixel ({r},{c}) outside its region");
        }
    }
}

#[test]
fn payloads_are_reproducible_per_key() {
    let cfg = SynthConfig::desk(11);
    let specs = identities(3, 11);
    for m in Modality::ALL {
        let a = synthgen::render(&cfg, &specs[2], m, 3);
        let b = synthgen::render(&cfg, &specs[2], m, 3);
        assert_eq!(a, b);
        assert_ne!(a, synthgen::render(&cfg, &specs[2], m, 2), "{m} ignores the view");
    }
}

#[test]
fn desk_dataset_shape() {
    let ds = generate(&SynthConfig::desk(1)).unwrap();
    assert_eq!(ds.identities.len(), 30);
    let counts = modality_counts(&ds.samples);
    for m in Modality::ALL {
        assert_eq!(counts[&m], 30 * 4);
    }
    for s in &ds.samples {
        match (&s.payload, s.modality) {
            (Payload::Text(t), Modality::Text) => assert!(t.len() <= ds.cfg.max_text_len()),
            (Payload::Image(img), m) => {
                assert_eq!((img.height(), img.width(), img.channels()), (32, 16, m.channels()))
            }
            _ => panic!("payload kind does not match modality"),
        }
    }
    let (train, test) = ds.split(2.0 / 3.0).unwrap();
    let tr: BTreeSet<usize> = train.iter().map(|s| s.identity).collect();
    let te: BTreeSet<usize> = test.iter().map(|s| s.identity).collect();
    assert_eq!((tr.len(), te.len()), (20, 10));
    assert!(tr.is_disjoint(&te));
}

#[test]
fn split_is_seeded_and_validated() {
    let ids: Vec<usize> = (0..30).collect();
    assert_eq!(split_identities(&ids, 2.0 / 3.0, 4).unwrap(), split_identities(&ids, 2.0 / 3.0, 4).unwrap());
    assert_ne!(split_identities(&ids, 2.0 / 3.0, 4).unwrap(), split_identities(&ids, 2.0 / 3.0, 5).unwrap());
    assert!(split_identities(&ids, 0.0, 4).is_err());
    assert!(split_identities(&ids, 1.0, 4).is_err());
    assert!(split_identities(&ids, 0.01, 4).is_err());
}

#[test]
fn mean_colour_probe_separates_rgb_but_not_sketch() {
    let ds = generate(&SynthConfig::desk(2)).unwrap();
    let feats = |m: Modality| -> Vec<(usize, usize, Vec<f64>)> {
        ds.samples
            .iter()
            .filter(|s| s.modality == m)
            .map(|s| (s.identity, s.view, s.image().unwrap().mean_color()))
            .collect()
    };
    let rgb = synthgen::pair_separability(&feats(Modality::Rgb));
    let sk = synthgen::pair_separability(&feats(Modality::Sketch));
    assert!(rgb >= 0.8, "rgb separability {rgb}");
    assert!(sk <= 0.55, "sketch separability {sk}");
}

#[test]
fn written_dataset_reloads_bit_exactly() {
    let cfg = SynthConfig { n_identities: 4, views: 2, ..SynthConfig::desk(8) };
    let ds = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let entries = dataset::write_split(dir.path(), "train", &ds.samples).unwrap();
    assert_eq!(entries.len(), ds.samples.len());
    let loaded = dataset::load_manifest(&dataset::manifest_path(dir.path(), "train")).unwrap();
    assert_eq!(loaded, ds.samples);

    let victim = dir.path().join(&entries[0].path);
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(dataset::load_manifest(&dataset::manifest_path(dir.path(), "train")).is_err());
}
