fn main() {
    // Decompositions are backed by the system OpenBLAS, which bundles LAPACK.
    println!("cargo:rustc-link-lib=dylib=openblas");
}
