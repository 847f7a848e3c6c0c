fn main() {
    println!("deyo CLI placeholder");
}
