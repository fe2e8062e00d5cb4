use fusepose::config::*;
use fusepose::fusion::ModelConfig;

#[test]
fn presets() {
    assert_eq!(Preset::parse("large").unwrap(), Preset::Large);
    assert_eq!(Preset::parse("desk").unwrap(), Preset::Desk);
    assert!(Preset::parse("big").is_err());
    assert_eq!(Preset::Large.config(), RunConfig::default());
    assert_eq!(Preset::Desk.config().model, ModelConfig::desk());
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    assert_eq!(RunConfig::from_toml("preset = \"desk\"").unwrap().model, ModelConfig::desk());
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(RunConfig::from_toml("bogus = 1").is_err());
    assert!(RunConfig::from_toml("[train]\nepochz = 3").is_err());
    assert!(RunConfig::from_toml("[model]\nlayerz = 3").is_err());
    assert!(RunConfig::from_toml("[train]\nepochs = \"many\"").is_err());
    assert!(RunConfig::from_toml("preset = 3").is_err());
    assert!(RunConfig::from_toml("not toml [").is_err());
}

#[test]
fn missing_keys_keep_preset_values() {
    let c = RunConfig::from_toml_with("[train]\nepochs = 7\n[model]\nlayers = 1", Preset::Desk).unwrap();
    assert_eq!(c.train.epochs, 7);
    assert_eq!(c.model.layers, 1);
    assert_eq!(c.model.d_model, ModelConfig::desk().d_model);
    assert_eq!(c.train.lr, RunConfig::default().train.lr);
}

#[test]
fn precedence_layers() {
    // Seed override beats the preset, the file beats the seed override.
    let c = RunConfig::resolve(None, Some(Preset::Desk), Some(42)).unwrap();
    assert_eq!((c.train.seed, c.synth.seed), (42, 42));
    let c = RunConfig::resolve(Some("[train]\nseed = 5"), None, Some(42)).unwrap();
    assert_eq!((c.train.seed, c.synth.seed), (5, 42));
    // An explicit preset beats the file's own preset key.
    let c = RunConfig::resolve(Some("preset = \"desk\""), Some(Preset::Large), None).unwrap();
    assert_eq!(c.model, ModelConfig::default());
    let c = RunConfig::resolve(Some("preset = \"desk\""), None, None).unwrap();
    assert_eq!(c.model, ModelConfig::desk());
}

#[test]
fn toml_round_trip() {
    for p in [Preset::Large, Preset::Desk] {
        let mut c = p.config();
        c.train.epochs = 3;
        c.loss.lambda = 0.25;
        c.synth.n_samples = 77;
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml_with(&text, Preset::Large).unwrap(), c);
        assert_eq!(c.experiment().loss.lambda, 0.25);
    }
}

#[test]
fn load_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[synth]\nn_samples = 12").unwrap();
    assert_eq!(RunConfig::load(&path, Preset::Desk).unwrap().synth.n_samples, 12);
    assert!(matches!(RunConfig::load(&dir.path().join("nope.toml"), Preset::Desk), Err(ConfigError::Io(_))));
}
