//! Holds the `acceptance` test target, which prints one PASS/FAIL/SKIP line
//! per criterion. Run it with `cargo test -p clustergen-acceptance`.
