fn main() {
    // LAPACK (dsyevd, dpotrf, dpotrs) comes from the system BLAS library.
    let lib = std::env::var("RLSLAB_LAPACK_LIB").unwrap_or_else(|_| "openblas".to_string());
    println!("cargo:rustc-link-lib={lib}");
    println!("cargo:rustc-check-cfg=cfg(rlslab_openblas)");
    if lib == "openblas" {
        println!("cargo:rustc-cfg=rlslab_openblas");
    }
    println!("cargo:rerun-if-env-changed=RLSLAB_LAPACK_LIB");
}
