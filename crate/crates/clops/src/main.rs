fn main() {
    println!("clops");
}
