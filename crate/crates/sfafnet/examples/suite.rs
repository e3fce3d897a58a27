fn main() {
    let t0 = std::time::Instant::now();
    let results = sfafnet::gradcheck::run_suite(None).unwrap();
    for r in &results {
        println!("{} {}/{}: checked {} coords, max rel err {:.3e}", if r.pass {"PASS"} else {"FAIL"}, r.module, r.name, r.checked, r.max_rel_err);
    }
    println!("elapsed: {:?}", t0.elapsed());
    assert!(results.iter().all(|r| r.pass));
}
