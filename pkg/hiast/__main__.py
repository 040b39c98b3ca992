from hiast.main import main

main()
