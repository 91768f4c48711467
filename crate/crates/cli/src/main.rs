fn main() {
    println!("miras");
}
