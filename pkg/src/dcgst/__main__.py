from dcgst.cli import main

raise SystemExit(main())
