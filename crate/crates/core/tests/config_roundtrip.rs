use blockkd::config::ExperimentConfig;
use proptest::prelude::*;

fn config_text(seed: u64, tau: f64, beta: f64, warmup: usize, stones: &[usize], mode: &str) -> String {
    format!(
        r#"
[arch]
preset = "tiny-uniform"

[data]
kind = "tiny_images"
n = 300

[plan]
beta = {beta:?}
temperature = {tau:?}
warmup_epochs = {warmup}
stones = {stones:?}

[optim]
epochs = 2

[run]
seed = {seed}
mode = "{mode}"
"#
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resolved_config_round_trips(
        seed in 0u64..1_000_000,
        tau in 0.5f64..20.0,
        beta in 0.0f64..3.0,
        warmup in 0usize..10,
        mask in 0u8..8,
        mode in prop::sample::select(vec!["scratch", "kd", "blockkd"]),
    ) {
        let stones: Vec<usize> = (1..=3).filter(|i| mask & (1 << (i - 1)) != 0).collect();
        let cfg = ExperimentConfig::from_toml(&config_text(seed, tau, beta, warmup, &stones, mode)).unwrap();
        let resolved = cfg.resolved().unwrap();
        let again = ExperimentConfig::from_toml(&resolved.to_toml()).unwrap();
        prop_assert_eq!(&again, &resolved);
        prop_assert_eq!(again.resolved().unwrap(), resolved.clone());
        prop_assert_eq!(again.distill_plan().unwrap(), cfg.distill_plan().unwrap());
        prop_assert_eq!(again.spec().unwrap(), cfg.spec().unwrap());
    }
}
