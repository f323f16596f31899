use gpitlab_core::experiments::*;

#[test]
#[ignore]
fn shaped_noise_probe() {
    for (refl, epochs) in [("1", "40"), ("3", "40")] {
        let mut cfg = ExperimentConfig::default();
        for kv in [
            "train_items=128", "valid_items=32", "pretrain_warm_epochs=28",
            "pretrain_lr=5e-3", "batch_size=1",
        ] { cfg.set(kv).unwrap(); }
        cfg.set(&format!("pretrain_epochs={epochs}")).unwrap();
        cfg.set(&format!("rir_reflections={refl}")).unwrap();
        let pre = pretrain(&cfg, cfg.run_seed(0)).unwrap();
        eprintln!("@@ R={refl}: e8={:.2} e16={:.2} e24={:.2} e32={:.2} e39={:.2}",
            pre.log[8].valid_sisdr_db, pre.log[16].valid_sisdr_db, pre.log[24].valid_sisdr_db,
            pre.log[32].valid_sisdr_db, pre.log[39].valid_sisdr_db);
    }
}
