use msanet::gradcheck;

#[test]
fn suite_smoke() {
    let results = gradcheck::run_suite(7, 1e-3).unwrap();
    for r in &results {
        println!("{r}");
    }
    assert!(!results.is_empty());
}
