use noisybp::metrics::RecordContext;
use noisybp::MetricsTable;
use noisybp_cli::chart::{render_chart, ChartConfig};
use noisybp_cli::io::{read_csv, write_csv};
use noisybp_cli::{emit_json, load_json};
use proptest::prelude::*;

fn table_from(rows: &[(u8, Option<usize>, u16, u8, f64)]) -> MetricsTable {
    let ctx = RecordContext {
        experiment: "prop".into(),
        recipe: "custom".into(),
        trials: 12,
        seed: 99,
    };
    let mut t = MetricsTable::new();
    for &(v, node, x, m, value) in rows {
        // Duplicate keys are rejected by design; keep the first.
        let _ = t.push(ctx.record(
            &format!("v{v}"),
            node,
            f64::from(x) / 4.0,
            ["dsnr_db", "pf", "pd"][usize::from(m)],
            value,
        ));
    }
    t
}

fn value() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => any::<f64>().prop_filter("finite", |v| v.is_finite()),
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
    ]
}

fn rows() -> impl Strategy<Value = Vec<(u8, Option<usize>, u16, u8, f64)>> {
    prop::collection::vec((0u8..3, prop::option::of(0usize..6), 0u16..40, 0u8..3, value()), 0..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(rows in rows()) {
        let t = table_from(&rows);
        let mut buf = Vec::new();
        write_csv(&t, &mut buf).unwrap();
        prop_assert_eq!(read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn json_round_trip(rows in rows()) {
        let t = table_from(&rows);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        emit_json(&t, &path).unwrap();
        prop_assert_eq!(load_json(&path).unwrap(), t);
    }

    #[test]
    fn charts_are_deterministic(rows in rows()) {
        let t = table_from(&rows);
        for (_, config) in ChartConfig::defaults(&t) {
            let a = render_chart(&t, &config);
            let b = render_chart(&t.clone(), &config);
            prop_assert_eq!(a.ok(), b.ok());
        }
    }
}
