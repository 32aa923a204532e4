fn main() {
    println!("{}", mmkg_core::probe(0.5));
}
