use std::fs;
use std::path::Path;

use hd2s::data::image_io::{read_gray8, to_bytes};
use hd2s::data::{generate_synthetic, load_clip, Dataset, DatasetManifest, SyntheticSpec};
use hd2s::{DomainTag, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        videos: 3,
        length: 20,
        ..SyntheticSpec::default()
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    generate_synthetic(&small_spec(), 5, &a).unwrap();
    generate_synthetic(&small_spec(), 5, &b).unwrap();
    generate_synthetic(&small_spec(), 6, &c).unwrap();
    let ta = tree_bytes(&a);
    assert_eq!(ta.len(), 1 + 3 * (2 * 20 + 1));
    assert_eq!(ta, tree_bytes(&b));
    assert_ne!(ta, tree_bytes(&c));
}

#[test]
fn densities_survive_ingestion_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small_spec(), 9, dir.path()).unwrap();
    let data = Dataset::load(&m, 1, 32, 48).unwrap();
    for v in &data.videos {
        for (t, d) in v.density.iter().enumerate() {
            let sum: f64 = d.data().iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-5);
            let max = d.data().iter().cloned().fold(0.0f32, f32::max);
            let again = to_bytes(&d.data().iter().map(|&x| x / max).collect::<Vec<_>>());
            let (_, _, stored) = read_gray8(&m.density_path(&v.id, t)).unwrap();
            for (x, y) in again.iter().zip(&stored) {
                assert!((*x as i32 - *y as i32).abs() <= 1);
            }
        }
        for fx in &v.fixations {
            assert!(fx.iter().all(|&(x, y)| x < 48 && y < 32));
        }
    }
}

#[test]
fn clip_loading_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        videos: 1,
        length: 20,
        ..SyntheticSpec::default()
    };
    let m = generate_synthetic(&spec, 3, dir.path()).unwrap();
    let data = Dataset::load(&m, 1, 32, 48).unwrap();
    let id = m.videos[0].id.clone();
    let plane = 32 * 48;
    let frame = |i: usize| data.videos[0].frames[i].data().to_vec();

    // forward clip ending at the T-th frame covers frames 1..T
    let s = load_clip(&m, &id, 7, 8, false, 1, 32, 48).unwrap();
    assert_eq!(s.clip.shape(), &[1, 8, 32, 48]);
    for k in 0..8 {
        assert_eq!(&s.clip.data()[k * plane..(k + 1) * plane], &frame(k)[..]);
    }
    // reversed clip for the first frame of a T=16 model: frames 16 down to 1
    let s = load_clip(&m, &id, 0, 16, true, 1, 32, 48).unwrap();
    for k in 0..16 {
        assert_eq!(&s.clip.data()[k * plane..(k + 1) * plane], &frame(15 - k)[..]);
    }
    let sum: f64 = s.density.data().iter().map(|&x| x as f64).sum();
    assert!((sum - 1.0).abs() < 1e-5);

    // resizing on load keeps densities normalized
    let s = load_clip(&m, &id, 9, 4, false, 1, 64, 96).unwrap();
    assert_eq!(s.clip.shape(), &[1, 4, 64, 96]);
    let sum: f64 = s.density.data().iter().map(|&x| x as f64).sum();
    assert!((sum - 1.0).abs() < 1e-5);
    assert!(s.fixations.iter().all(|&(x, y)| x < 96 && y < 64));

    assert!(matches!(load_clip(&m, &id, 3, 8, false, 1, 32, 48), Err(Error::Input(_))));
    let missing = m.frame_path(&id, 2);
    fs::remove_file(&missing).unwrap();
    match load_clip(&m, &id, 7, 8, false, 1, 32, 48) {
        Err(Error::Ingestion { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected an ingestion error, got {other:?}"),
    }
}

#[test]
fn seeded_clip_sampling_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small_spec(), 4, dir.path()).unwrap();
    let data = Dataset::load(&m, 1, 32, 48).unwrap();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..6).map(|_| data.sample(&mut rng, 8).unwrap().clip).collect::<Vec<_>>()
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
}

#[test]
fn manifest_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        domain: DomainTag(3),
        ..small_spec()
    };
    let m = generate_synthetic(&spec, 1, dir.path()).unwrap();
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
    assert_eq!(m.domain, DomainTag(3));
    assert!(matches!(
        DatasetManifest::load(&dir.path().join("nowhere")),
        Err(Error::Ingestion { .. })
    ));
}
