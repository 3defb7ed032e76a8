use fpp_core::cli_harness::{
    run_subcommand, write_report, Format, Overrides, Resolved, RunConfig, Subcommand, Table,
};

fn preset(name: &str, extra: &str) -> Resolved {
    let text = format!("schema = 1\npreset = \"{name}\"\n{extra}");
    Resolved::new(RunConfig::from_toml(&text).unwrap()).unwrap()
}

#[test]
fn written_csv_reads_back_with_its_header() {
    let run = preset("cir-power", "[grid]\nt = [0.5]\nx = [1.0, 2.0]\ny1 = [2.0]\ny2 = [1.0]\n");
    let rep = run_subcommand(&run, Subcommand::Portfolio).unwrap();
    let dir = std::env::temp_dir().join(format!("fpp-pipeline-{}", std::process::id()));
    let paths = write_report(&run, Subcommand::Portfolio, &rep, &dir).unwrap();
    let text = std::fs::read_to_string(&paths[0]).unwrap();
    assert!(text.starts_with("# fpp: portfolio\n"));
    assert!(text.contains(&format!("# config_sha256: {}\n", run.hash())));
    let back = Table::from_csv("portfolio", &text).unwrap();
    let orig = rep.table("portfolio").unwrap();
    assert_eq!(back.columns, orig.columns);
    assert_eq!(back.len(), orig.len());
    for c in &orig.columns {
        let (a, b) = (orig.column(c).unwrap(), back.column(c).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!(u.to_bits() == v.to_bits() || (u.is_nan() && v.is_nan()), "{c}");
        }
    }
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn hash_ignores_output_dir_but_not_seed() {
    let base = RunConfig::preset("ou-linear").unwrap();
    let mut moved = base.clone();
    moved
        .apply(&Overrides {
            out_dir: Some("elsewhere".into()),
            format: Some(Format::Json),
            ..Overrides::default()
        })
        .unwrap();
    let mut reseeded = base.clone();
    reseeded.apply(&Overrides { seed: Some(99), ..Overrides::default() }).unwrap();
    assert_ne!(base.hash(), reseeded.hash());
    assert_ne!(base.hash(), moved.hash(), "format is part of the run");
    moved.output.format = base.output.format;
    assert_eq!(base.hash(), moved.hash());
}

#[test]
fn preset_survives_toml_round_trip() {
    for name in ["cir-power", "ou-linear"] {
        let a = RunConfig::preset(name).unwrap();
        let b = RunConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a.canonical_json(), b.canonical_json());
    }
}

#[test]
fn expansion_drift_shrinks_without_closed_form() {
    // Widder datum and affine lambda: no oracle, so Theta runs on the expansion
    let run = preset(
        "ou-linear",
        "[grid]\nt = [0.5]\nx = [1.0, 2.0]\ny1 = [0.0]\ny2 = [-0.5, 0.5]\n[drift]\npairs = [[1e-2, 1e-2], [1e-3, 1e-3]]\n",
    );
    assert!(run.benchmark.is_none());
    let rep = run_subcommand(&run, Subcommand::Drift).unwrap();
    let sup = rep.table("drift_scan").unwrap().column("sup_abs_theta").unwrap();
    assert_eq!(sup.len(), 2);
    assert!(sup[1] < 0.5 * sup[0], "{sup:?}");
    assert!(sup[0] < 1e-2, "{sup:?}");
}
