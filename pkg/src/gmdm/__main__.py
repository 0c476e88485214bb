from gmdm.cli import main

main()
