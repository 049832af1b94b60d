from dessim.cli import main

raise SystemExit(main())
