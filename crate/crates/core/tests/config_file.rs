use std::path::Path;

use spkcam::config::RunConfig;

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let mut loaded = RunConfig::load(&path).unwrap();
    let mut expected = RunConfig::default();
    expected.apply_seed(0);
    assert_eq!(loaded.paths.results, path.parent().unwrap().join("../results"));
    loaded.paths = expected.paths.clone();
    assert_eq!(loaded, expected);
}
