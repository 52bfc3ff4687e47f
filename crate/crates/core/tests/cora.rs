use std::path::PathBuf;

use hugnn::graph::{homophily_ratio, load_bundle, Role};

fn cora_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cora")
}

#[test]
fn cora_loads_with_expected_shape() {
    let b = load_bundle(&cora_dir()).unwrap();
    b.validate().unwrap();
    assert_eq!(
        (b.n(), b.graph.m(), b.features.cols(), b.num_classes),
        (2708, 5278, 1433, 7)
    );
    assert_eq!(b.count(Role::Train), 140);
    for c in 0..7 {
        let k = b.mask(Role::Train).into_iter().filter(|&i| b.label(i) == c).count();
        assert_eq!(k, 20, "class {c}");
    }
    let h = homophily_ratio(&b).unwrap();
    assert!((h - 0.81).abs() <= 0.01, "homophily {h}");
}
