use proptest::prelude::*;
use retline_core::cost::{
    flops_closed_form, flops_instrumented, kv_recurrent_crossover, memory_elements, scalar_closed_form, sweep_csv, sweep_rows,
    CostForm, MemoryMethod, SweepRanges,
};

/// Hand-expanded published totals.
fn published(form: CostForm, n: u64, d: u64) -> u64 {
    match form {
        CostForm::Vanilla => 2 * n * n * d + n * n - 1 + n * (d - 1),
        CostForm::KvCached => 2 * d * n + 2 * (n - 1),
        CostForm::Recurrent => 2 * d * d + d - 1,
    }
}

#[test]
fn closed_forms_match_hand_expansion() {
    for form in CostForm::ALL {
        for n in 1..=16u64 {
            for d in [1, 2, 4, 8, 16u64] {
                let r = flops_closed_form(form, n as usize, d as usize).unwrap();
                assert_eq!(r.total, published(form, n, d));
                assert_eq!(r.total, r.mults + r.adds);
            }
        }
    }
}

#[test]
fn instrumented_multiplications_match_published() {
    for form in CostForm::ALL {
        for n in 1..=16 {
            for d in [1, 2, 4, 8, 16] {
                let m = flops_instrumented(form, n, d).unwrap();
                assert_eq!(m.mults, flops_closed_form(form, n, d).unwrap().mults);
                assert_eq!(m, scalar_closed_form(form, n, d).unwrap());
            }
        }
    }
}

#[test]
fn per_step_shapes() {
    for d in [1, 2, 4, 8, 16] {
        let r1 = flops_instrumented(CostForm::Recurrent, 1, d).unwrap().total;
        for n in 2..=16 {
            assert_eq!(flops_instrumented(CostForm::Recurrent, n, d).unwrap().total, r1);
            let diff = flops_instrumented(CostForm::KvCached, n, d).unwrap().total
                - flops_instrumented(CostForm::KvCached, n - 1, d).unwrap().total;
            assert_eq!(diff as usize, 4 * d - 1);
            let pub_diff = flops_closed_form(CostForm::KvCached, n, d).unwrap().total
                - flops_closed_form(CostForm::KvCached, n - 1, d).unwrap().total;
            assert_eq!(pub_diff as usize, 2 * d + 2);
        }
    }
}

#[test]
fn sweep_shape() {
    let r = SweepRanges {
        n: vec![1, 2, 3],
        d: vec![4, 8],
        beam: vec![1, 10],
        n_decoded: vec![5, 94],
        heads: vec![2],
    };
    let rows = sweep_rows(&r, &CostForm::ALL).unwrap();
    assert_eq!(rows.len(), 3 * 2 * 2 * 2 * 3);
    for row in rows.iter().filter(|r| r.form == CostForm::Recurrent) {
        assert_eq!(row.persistent_elems, (row.beam * row.d * row.d / row.heads) as u64);
        assert_eq!(row.crossover, row.n > row.d);
    }
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), rows.len() + 1);
    assert!(csv.starts_with("form,n,d,B,N,H,mults,adds,total,closed_form_total,persistent_elems,peak_elems,crossover\n"));
    assert!(sweep_rows(&SweepRanges { n: vec![], ..r }, &CostForm::ALL).is_err());
    assert_eq!(kv_recurrent_crossover(8).unwrap(), 8);
}

proptest! {
    #[test]
    fn memory_scaling(b in 1usize..20, n in 1usize..200, h in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let d = 8 * h;
        let rec = memory_elements(MemoryMethod::Recurrent, b, n, d, h).unwrap();
        prop_assert_eq!(rec, memory_elements(MemoryMethod::Recurrent, b, n + 7, d, h).unwrap());
        let pers = memory_elements(MemoryMethod::KvPersistent, b, n, d, h).unwrap();
        prop_assert_eq!(memory_elements(MemoryMethod::KvPeak, b, n, d, h).unwrap(), 2 * pers);
        prop_assert_eq!(pers, (2 * b * n * d) as u64);
    }
}
